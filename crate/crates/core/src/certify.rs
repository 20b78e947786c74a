//! Closed-form l2 robustness certificates for nearest-centroid classifiers.
//!
//! For a feature `f = f(x)` whose nearest centroid is `mu1` and whose nearest
//! centroid of any other class is `mu2`, no perturbation with
//!
//! ```text
//! ||delta|| < (||f - mu2||^2 - ||f - mu1||^2) / (2 L ||mu2 - mu1||)
//! ```
//!
//! can change the nearest-centroid decision when `f` is `L`-Lipschitz: the
//! decision between `mu1` and `mu2` is the bisector hyperplane, and `f` can
//! move at most `L ||delta||` toward it. The certified decision rule is the
//! hard nearest-centroid assignment, which coincides with the argmax of
//! [`crate::metric::infer`] when every class has one centroid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_with_rule, AttackConfig, DecisionRule, Norm, Objective};
use crate::clustering::{ClusterId, ClusterModel};
use crate::datasets::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::metric::MagnetConfig;
use crate::nn::DenseNet;
use crate::seed::{self, stage};
use crate::vecops::{norm, sq_dist};

/// Relative overshoot of the extremal perturbation in [`tightness_witness`].
pub const TIGHTNESS_OVERSHOOT: f64 = 1e-6;

/// The two competing centroids of a feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentroidPair {
    pub mu1: ClusterId,
    pub mu2: ClusterId,
    pub d1_sq: f64,
    pub d2_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub index: usize,
    pub label: usize,
    pub predicted_class: usize,
    pub correct: bool,
    pub radius: f64,
    pub mu1: ClusterId,
    pub mu2: ClusterId,
    pub lipschitz_used: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedCurve {
    pub radii: Vec<f64>,
    pub certified_accuracy: Vec<f64>,
    pub auc: f64,
}

/// `mu1`: nearest centroid overall; `mu2`: nearest centroid of any other
/// class. Ties go to the lowest (class, cluster).
pub fn select_centroid_pair(feature: &[f64], model: &ClusterModel) -> Result<CentroidPair> {
    check_dim(model.feature_dim(), feature.len())?;
    if model.num_classes() < 2 {
        return Err(Error::Infeasible("certification needs at least two classes".into()));
    }
    let (mu1, d1_sq) = model.nearest(feature);
    let mut best: Option<(ClusterId, f64)> = None;
    for (id, mu) in model.iter() {
        if id.class == mu1.class {
            continue;
        }
        let d = sq_dist(feature, mu);
        if best.is_none_or(|b| d < b.1) {
            best = Some((id, d));
        }
    }
    let (mu2, d2_sq) = best.expect("at least two classes");
    Ok(CentroidPair { mu1, mu2, d1_sq, d2_sq })
}

fn radius_for_pair(pair: &CentroidPair, model: &ClusterModel, lipschitz: f64) -> Result<f64> {
    let gap = sq_dist(model.centroid(pair.mu1), model.centroid(pair.mu2)).sqrt();
    if gap == 0.0 {
        return Err(Error::DegenerateModel(format!(
            "centroids {:?} and {:?} coincide",
            pair.mu1, pair.mu2
        )));
    }
    Ok(((pair.d2_sq - pair.d1_sq) / (2.0 * lipschitz * gap)).max(0.0))
}

fn check_lipschitz(lipschitz: f64) -> Result<()> {
    if lipschitz > 0.0 && lipschitz.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("Lipschitz constant must be positive and finite, got {lipschitz}")))
    }
}

/// Certified l2 input-space radius of a feature, clamped at zero.
pub fn robust_radius(feature: &[f64], model: &ClusterModel, lipschitz: f64) -> Result<f64> {
    check_lipschitz(lipschitz)?;
    let pair = select_centroid_pair(feature, model)?;
    radius_for_pair(&pair, model, lipschitz)
}

/// Certificates for every instance of `data`, in order.
pub fn certify_dataset(
    net: &DenseNet,
    model: &ClusterModel,
    data: &LabeledDataset,
    lipschitz: f64,
) -> Result<Vec<CertificateReport>> {
    check_lipschitz(lipschitz)?;
    check_dim(net.input_dim(), data.input_dim())?;
    check_dim(model.feature_dim(), net.output_dim())?;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let f = net.forward(&data.inputs()[i])?;
            let pair = select_centroid_pair(&f, model)?;
            let radius = radius_for_pair(&pair, model, lipschitz)?;
            let label = data.labels()[i];
            Ok(CertificateReport {
                index: i,
                label,
                predicted_class: pair.mu1.class,
                correct: pair.mu1.class == label,
                radius,
                mu1: pair.mu1,
                mu2: pair.mu2,
                lipschitz_used: lipschitz,
            })
        })
        .collect()
}

/// Certified accuracy at each grid radius: the fraction of instances that
/// are correct and whose radius is strictly larger. AUC by the trapezoid
/// rule over the grid.
pub fn curve_from_reports(reports: &[CertificateReport], grid: &[f64]) -> Result<CertifiedCurve> {
    validate_grid(grid)?;
    if reports.is_empty() {
        return Err(Error::InvalidInput("no certificates to summarize".into()));
    }
    let n = reports.len() as f64;
    let acc: Vec<f64> = grid
        .iter()
        .map(|&r| reports.iter().filter(|c| c.correct && c.radius > r).count() as f64 / n)
        .collect();
    let auc = grid
        .windows(2)
        .zip(acc.windows(2))
        .map(|(r, a)| (r[1] - r[0]) * (a[0] + a[1]) / 2.0)
        .sum();
    Ok(CertifiedCurve { radii: grid.to_vec(), certified_accuracy: acc, auc })
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("radius grid is empty".into()));
    }
    if grid.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::InvalidInput("radius grid must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("radius grid must be ascending".into()));
    }
    Ok(())
}

pub fn certified_curve(
    net: &DenseNet,
    model: &ClusterModel,
    data: &LabeledDataset,
    grid: &[f64],
    lipschitz: f64,
) -> Result<CertifiedCurve> {
    validate_grid(grid)?;
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot certify an empty dataset".into()));
    }
    curve_from_reports(&certify_dataset(net, model, data, lipschitz)?, grid)
}

/// Moves `feature` by `scale * L * radius` along `(mu2 - mu1) / ||mu2 - mu1||`
/// and reports whether the nearest-centroid class changes.
pub fn tightness_witness_scaled(
    feature: &[f64],
    model: &ClusterModel,
    lipschitz: f64,
    radius: f64,
    scale: f64,
) -> Result<bool> {
    check_lipschitz(lipschitz)?;
    if radius == 0.0 {
        return Ok(true);
    }
    let pair = select_centroid_pair(feature, model)?;
    let mu1 = model.centroid(pair.mu1);
    let mu2 = model.centroid(pair.mu2);
    let dir: Vec<f64> = mu2.iter().zip(mu1).map(|(a, b)| a - b).collect();
    let gap = norm(&dir);
    if gap == 0.0 {
        return Err(Error::DegenerateModel("coincident centroid pair".into()));
    }
    let step = scale * lipschitz * radius / gap;
    let moved: Vec<f64> = feature.iter().zip(&dir).map(|(f, d)| f + step * d).collect();
    Ok(model.predict_nearest(&moved) != pair.mu1.class)
}

/// Whether the extremal feature-space perturbation just beyond the
/// certified magnitude flips the nearest-centroid decision.
pub fn tightness_witness(feature: &[f64], model: &ClusterModel, lipschitz: f64, radius: f64) -> Result<bool> {
    tightness_witness_scaled(feature, model, lipschitz, radius, 1.0 + TIGHTNESS_OVERSHOOT)
}

/// Settings for the l2-PGD falsification of certificates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FalsifyConfig {
    /// Attack budget as a fraction of each certified radius.
    pub budget_fraction: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Step size as a multiple of `budget / iterations`.
    pub step_multiplier: f64,
    pub seed: u64,
}

impl Default for FalsifyConfig {
    fn default() -> Self {
        Self { budget_fraction: 0.99, iterations: 100, restarts: 50, step_multiplier: 2.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsificationReport {
    pub tested: usize,
    pub skipped_zero_radius: usize,
    pub violations: usize,
    pub violating_indices: Vec<usize>,
    pub lipschitz_used: f64,
}

/// Attacks every input with a positive radius using l2-PGD at
/// `budget_fraction * radius` and counts nearest-centroid decision flips.
/// A sound certificate yields zero.
pub fn attack_falsification(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    data: &LabeledDataset,
    lipschitz: f64,
    settings: &FalsifyConfig,
) -> Result<FalsificationReport> {
    if !(settings.budget_fraction > 0.0) || settings.iterations == 0 || settings.restarts == 0 || !(settings.step_multiplier > 0.0) {
        return Err(Error::InvalidInput("falsification needs positive budget, iterations, restarts and step".into()));
    }
    let reports = certify_dataset(net, model, data, lipschitz)?;
    let outcomes: Vec<Option<bool>> = reports
        .par_iter()
        .map(|rep| {
            if rep.radius <= 0.0 {
                return Ok(None);
            }
            let eps = settings.budget_fraction * rep.radius;
            let atk = AttackConfig {
                norm: Norm::L2,
                epsilon: eps,
                eta: settings.step_multiplier * eps / settings.iterations as f64,
                iterations: settings.iterations,
                restarts: settings.restarts,
                objective: Objective::CeVsLabel,
                seed: seed::derive(settings.seed, stage::FALSIFY, &[rep.index as u64]),
            };
            let x = &data.inputs()[rep.index];
            let res = pgd_with_rule(net, model, cfg, x, rep.predicted_class, &atk, DecisionRule::NearestCentroid)?;
            Ok(Some(res.success))
        })
        .collect::<Result<_>>()?;

    let mut report = FalsificationReport {
        tested: 0,
        skipped_zero_radius: 0,
        violations: 0,
        violating_indices: Vec::new(),
        lipschitz_used: lipschitz,
    };
    for (rep, out) in reports.iter().zip(outcomes) {
        match out {
            None => report.skipped_zero_radius += 1,
            Some(flipped) => {
                report.tested += 1;
                if flipped {
                    report.violations += 1;
                    report.violating_indices.push(rep.index);
                }
            }
        }
    }
    Ok(report)
}
