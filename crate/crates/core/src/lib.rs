//! Clustering-based (distance-based) classifiers with a closed-form l2
//! robustness certificate.
//!
//! A [`nn::DenseNet`] maps inputs in the unit box to a feature space where
//! each class is represented by one or more K-means centroids
//! ([`clustering::ClusterModel`]). Inputs are classified by the nearest
//! centroid (or the soft rule in [`metric::infer`]), and because the feature
//! map is Lipschitz, the margin between the two nearest centroids of different
//! classes translates into a certified input-space radius
//! ([`certify::robust_radius`]).
//!
//! Training pipelines live in [`train`]: plain cross-entropy, Magnet Loss from
//! scratch, warm-started Magnet fine-tuning (ClusTR) and ClusTR with a
//! one-step consistency adversary (QTRADES). [`attacks`] implements the PGD
//! engine used both for evaluation and for empirically falsifying
//! certificates.

pub mod attacks;
pub mod certify;
pub mod cli;
pub mod clustering;
pub mod datasets;
pub mod error;
pub mod metric;
pub mod nn;
pub mod seed;
pub mod train;
mod vecops;

pub use error::{Error, Result};
