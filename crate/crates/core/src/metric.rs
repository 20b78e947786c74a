//! Magnet Loss, soft nearest-cluster inference and cross-entropy terms.
//!
//! The Magnet Loss is one instance of the general clustering-loss family
//! `H(F(f, own-class centroids), G(f, foreign centroids))`: `F` is the scaled
//! squared distance to the instance's assigned centroid, `G` is the
//! log-sum-exp of negative scaled squared distances to every foreign
//! centroid, and `H` adds them to the margin `alpha` under a hinge. Only
//! this instance is implemented.
//!
//! The shared variance `sigma_sq` comes from the [`ClusterModel`] and is
//! treated as a constant: no gradient flows through it.

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterId, ClusterModel};
use crate::error::{check_dim, Error, Result};
use crate::vecops::{argmax, log_sum_exp, softmax, sq_dist};

/// Probabilities are clamped into `[CE_CLAMP, 1 - CE_CLAMP]` before taking
/// logs in [`cross_entropy`].
pub const CE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetConfig {
    /// Hinge margin, `>= 0`.
    pub alpha: f64,
    /// Restrict inference to the `D` globally nearest clusters.
    #[serde(default)]
    pub d_nearest: Option<usize>,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        Self { alpha: 1.0, d_nearest: None }
    }
}

impl MagnetConfig {
    pub fn new(alpha: f64, d_nearest: Option<usize>) -> Result<Self> {
        let cfg = Self { alpha, d_nearest };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.d_nearest == Some(0) {
            return Err(Error::InvalidInput("d_nearest must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks the cutoff against a concrete model.
    pub fn validate_for(&self, model: &ClusterModel) -> Result<()> {
        self.validate()?;
        if let Some(d) = self.d_nearest {
            if d > model.total_clusters() {
                return Err(Error::InvalidInput(format!(
                    "d_nearest {d} exceeds the {} clusters of the model",
                    model.total_clusters()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

/// A feature vector with its class and K-means assignment.
#[derive(Clone, Copy, Debug)]
pub struct MagnetSample<'a> {
    pub feature: &'a [f64],
    pub assigned: ClusterId,
}

/// Target of a cross-entropy term: a hard label or a probability vector.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Label(usize),
    Distribution(&'a [f64]),
}

impl Target<'_> {
    fn weights(&self, num_classes: usize) -> Result<Vec<f64>> {
        match *self {
            Target::Label(y) => {
                if y >= num_classes {
                    return Err(Error::InvalidInput(format!("target {y} out of range for {num_classes} classes")));
                }
                let mut t = vec![0.0; num_classes];
                t[y] = 1.0;
                Ok(t)
            }
            Target::Distribution(t) => {
                check_dim(num_classes, t.len())?;
                if t.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidInput("target distribution has negative or non-finite mass".into()));
                }
                Ok(t.to_vec())
            }
        }
    }
}

/// Per-class log-scores `z_c = LSE_j(-||f - mu_{c,j}||^2 / 2 sigma^2)` over
/// the surviving clusters, and the softmax-weighted centroid of each class,
/// so that `grad_f z_c = (m_c - f) / sigma^2`.
struct ClassScores {
    z: Vec<Option<f64>>,
    weighted_centroid: Vec<Vec<f64>>,
    /// `log p_c`, `-inf` for classes without surviving clusters.
    log_p: Vec<f64>,
    reference: usize,
}

fn surviving_clusters(feature: &[f64], model: &ClusterModel, d_nearest: Option<usize>) -> Vec<(ClusterId, f64)> {
    let mut all: Vec<(ClusterId, f64)> = model.iter().map(|(id, mu)| (id, sq_dist(feature, mu))).collect();
    if let Some(d) = d_nearest {
        let d = d.clamp(1, all.len());
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(d);
        all.sort_by_key(|a| a.0);
    }
    all
}

fn class_scores(feature: &[f64], model: &ClusterModel, cfg: &MagnetConfig) -> ClassScores {
    let two_s2 = 2.0 * model.sigma_sq();
    let l = model.num_classes();
    let dim = model.feature_dim();
    let kept = surviving_clusters(feature, model, cfg.d_nearest);

    let mut per_class: Vec<Vec<(ClusterId, f64)>> = vec![Vec::new(); l];
    for (id, d2) in kept {
        per_class[id.class].push((id, -d2 / two_s2));
    }
    let mut z = vec![None; l];
    let mut weighted_centroid = vec![vec![0.0; dim]; l];
    for (c, ks) in per_class.iter().enumerate() {
        if ks.is_empty() {
            continue;
        }
        let s: Vec<f64> = ks.iter().map(|k| k.1).collect();
        z[c] = Some(log_sum_exp(&s));
        for ((id, _), w) in ks.iter().zip(softmax(&s)) {
            for (m, mu) in weighted_centroid[c].iter_mut().zip(model.centroid(*id)) {
                *m += w * mu;
            }
        }
    }

    // log p_c = z_c - max - log1p(sum of the other exp terms)
    let zs: Vec<f64> = z.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
    let reference = argmax(&zs);
    let m = zs[reference];
    let rest: f64 = zs
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != reference)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    let lr = rest.ln_1p();
    let log_p = zs.iter().map(|&v| v - m - lr).collect();
    ClassScores { z, weighted_centroid, log_p, reference }
}

/// Soft class probabilities from distances to the cluster centroids. With
/// `d_nearest`, only the `D` nearest clusters enter either sum and classes
/// without a surviving cluster get probability zero.
pub fn infer(feature: &[f64], model: &ClusterModel, cfg: &MagnetConfig) -> ClassProbabilities {
    let scores = class_scores(feature, model, cfg);
    let probabilities: Vec<f64> = scores.log_p.iter().map(|lp| lp.exp()).collect();
    let predicted_class = argmax(&probabilities);
    ClassProbabilities { probabilities, predicted_class }
}

/// Cross-entropy between the soft prediction for `feature` and `target`,
/// with its exact gradient with respect to `feature`.
///
/// Evaluated in log space so confident predictions keep an informative
/// gradient. Target mass on a class cut off by `d_nearest` costs the clamped
/// constant `-ln(CE_CLAMP)` per unit and contributes no gradient.
pub fn soft_nll(feature: &[f64], model: &ClusterModel, cfg: &MagnetConfig, target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    check_dim(model.feature_dim(), feature.len())?;
    let l = model.num_classes();
    let t = target.weights(l)?;
    let sc = class_scores(feature, model, cfg);

    let mut value = 0.0;
    let mut total = 0.0;
    for c in 0..l {
        if t[c] == 0.0 {
            continue;
        }
        if sc.z[c].is_some() {
            value -= t[c] * sc.log_p[c];
            total += t[c];
        } else {
            value -= t[c] * CE_CLAMP.ln();
        }
    }

    // grad = sum_c a_c grad z_c with sum_c a_c = 0, so subtract the
    // reference class to avoid cancellation in a_ref = total * p_ref - t_ref.
    let s2 = model.sigma_sq();
    let r = sc.reference;
    let mut grad = vec![0.0; feature.len()];
    for c in 0..l {
        if c == r || sc.z[c].is_none() {
            continue;
        }
        let a = total * sc.log_p[c].exp() - t[c];
        if a == 0.0 {
            continue;
        }
        for ((g, mc), mr) in grad.iter_mut().zip(&sc.weighted_centroid[c]).zip(&sc.weighted_centroid[r]) {
            *g += a * (mc - mr) / s2;
        }
    }
    Ok((value, grad))
}

/// Unhinged Magnet term of one instance,
/// `alpha + ||f - mu_own||^2 / 2 sigma^2 + LSE_foreign(-||f - mu||^2 / 2 sigma^2)`,
/// and its gradient `(m_F - mu_own) / sigma^2` where `m_F` is the
/// softmax-weighted foreign centroid.
pub fn magnet_term(feature: &[f64], assigned: ClusterId, model: &ClusterModel, alpha: f64) -> Result<(f64, Vec<f64>)> {
    check_dim(model.feature_dim(), feature.len())?;
    if assigned.class >= model.num_classes() || assigned.cluster >= model.class_centroids(assigned.class).len() {
        return Err(Error::InvalidInput(format!("assigned cluster {assigned:?} does not exist")));
    }
    if model.num_classes() < 2 {
        return Err(Error::Infeasible("Magnet Loss needs clusters from at least two classes".into()));
    }
    let s2 = model.sigma_sq();
    let own = model.centroid(assigned);
    let foreign: Vec<&[f64]> = model.iter().filter(|(id, _)| id.class != assigned.class).map(|(_, mu)| mu).collect();
    let s: Vec<f64> = foreign.iter().map(|mu| -sq_dist(feature, mu) / (2.0 * s2)).collect();
    let value = alpha + sq_dist(feature, own) / (2.0 * s2) + log_sum_exp(&s);
    let mut grad: Vec<f64> = own.iter().map(|m| -m / s2).collect();
    for (mu, w) in foreign.iter().zip(softmax(&s)) {
        for (g, m) in grad.iter_mut().zip(mu.iter()) {
            *g += w * m / s2;
        }
    }
    Ok((value, grad))
}

/// Batch-mean hinged Magnet Loss and the gradient with respect to each
/// feature. Instances with a non-positive term contribute zero gradient.
pub fn magnet_loss_with_grad(
    batch: &[MagnetSample<'_>],
    model: &ClusterModel,
    cfg: &MagnetConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty Magnet batch".into()));
    }
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for s in batch {
        let (t, g) = magnet_term(s.feature, s.assigned, model, cfg.alpha)?;
        if t > 0.0 {
            loss += t;
            grads.push(g.into_iter().map(|v| v / b).collect());
        } else {
            grads.push(vec![0.0; s.feature.len()]);
        }
    }
    Ok((loss / b, grads))
}

pub fn magnet_loss(batch: &[MagnetSample<'_>], model: &ClusterModel, cfg: &MagnetConfig) -> Result<f64> {
    magnet_loss_with_grad(batch, model, cfg).map(|(l, _)| l)
}

pub fn magnet_loss_backward(batch: &[MagnetSample<'_>], model: &ClusterModel, cfg: &MagnetConfig) -> Result<Vec<Vec<f64>>> {
    magnet_loss_with_grad(batch, model, cfg).map(|(_, g)| g)
}

/// Softmax cross-entropy on raw logits, with the gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!("target {target} out of range for {} logits", logits.len())));
    }
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy `-sum_c t_c ln p_c` of a probability vector against a hard
/// label or a soft target, with the gradient w.r.t. the probabilities.
/// Probabilities are clamped into `[1e-12, 1 - 1e-12]`; clamped entries get
/// zero gradient.
pub fn cross_entropy(probs: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    let t = target.weights(probs.len())?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for ((g, &p), &tc) in grad.iter_mut().zip(probs).zip(&t) {
        let pc = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        loss -= tc * pc.ln();
        if p > CE_CLAMP && p < 1.0 - CE_CLAMP {
            *g = -tc / p;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(centroids: Vec<Vec<Vec<f64>>>, s2: f64) -> ClusterModel {
        ClusterModel::new(centroids, vec![], s2).unwrap()
    }

    fn id(class: usize) -> ClusterId {
        ClusterId { class, cluster: 0 }
    }

    #[test]
    fn magnet_hand_example() {
        let m = model(vec![vec![vec![1.0, 0.0]], vec![vec![2.0, 0.0]]], 2.0);
        let f1 = [0.0, 0.0];
        let f2 = [3.0, 0.0];
        let batch = [MagnetSample { feature: &f1, assigned: id(0) }, MagnetSample { feature: &f2, assigned: id(1) }];
        let cfg0 = MagnetConfig::new(0.0, None).unwrap();
        assert_eq!(magnet_loss(&batch, &m, &cfg0).unwrap(), 0.0);
        let cfg1 = MagnetConfig::new(1.0, None).unwrap();
        assert!((magnet_loss(&batch, &m, &cfg1).unwrap() - 0.25).abs() < 1e-15);
        // per-instance inner value 0.25 - 1 = -0.75
        let (t, _) = magnet_term(&f1, id(0), &m, 0.0).unwrap();
        assert!((t + 0.75).abs() < 1e-15);
    }

    #[test]
    fn magnet_threshold_at_own_centroid() {
        let s2 = 0.5;
        let alpha = 2.0;
        // zero exactly when dist^2 >= 2 sigma^2 alpha = 2
        for (dist2, zero) in [(1.0, false), (2.0, true), (3.0, true)] {
            let m = model(vec![vec![vec![0.0]], vec![vec![f64::sqrt(dist2)]]], s2);
            let f = [0.0];
            let l = magnet_loss(&[MagnetSample { feature: &f, assigned: id(0) }], &m, &MagnetConfig::new(alpha, None).unwrap()).unwrap();
            assert_eq!(l <= 1e-12, zero, "dist2 {dist2} loss {l}");
        }
    }

    #[test]
    fn magnet_inactive_batch_has_zero_gradient() {
        let m = model(vec![vec![vec![0.0, 0.0]], vec![vec![10.0, 0.0]]], 1.0);
        let f = [0.1, 0.0];
        let g = magnet_loss_backward(&[MagnetSample { feature: &f, assigned: id(0) }], &m, &MagnetConfig::new(1.0, None).unwrap()).unwrap();
        assert_eq!(g, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn magnet_alpha_does_not_change_active_gradient() {
        let m = model(vec![vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]], 1.0);
        let f = [0.4, 0.3];
        let s = [MagnetSample { feature: &f, assigned: id(0) }];
        let g1 = magnet_loss_backward(&s, &m, &MagnetConfig::new(1.0, None).unwrap()).unwrap();
        let g2 = magnet_loss_backward(&s, &m, &MagnetConfig::new(2.0, None).unwrap()).unwrap();
        assert_eq!(g1, g2);
        assert!(g1[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn magnet_single_class_is_infeasible() {
        let m = model(vec![vec![vec![0.0], vec![1.0]]], 1.0);
        let f = [0.3];
        let r = magnet_loss(&[MagnetSample { feature: &f, assigned: id(0) }], &m, &MagnetConfig::default());
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn infer_hand_examples() {
        let m = model(vec![vec![vec![0.0, 0.0]], vec![vec![0.0, 2.0]]], 2.0);
        let p = infer(&[0.0, 1.0], &m, &MagnetConfig::default());
        assert!((p.probabilities[0] - 0.5).abs() < 1e-15);
        assert_eq!(p.predicted_class, 0);

        let p = infer(&[0.0, 0.0], &m, &MagnetConfig::default());
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.probabilities[0] - expected).abs() < 1e-15);
        assert!((p.probabilities[0] - 0.7311).abs() < 1e-4);

        let p = infer(&[0.0, 1.9], &m, &MagnetConfig::new(1.0, Some(1)).unwrap());
        assert_eq!(p.probabilities, vec![0.0, 1.0]);
        assert_eq!(p.predicted_class, 1);
    }

    #[test]
    fn infer_d_nearest_zeroes_absent_classes() {
        let m = model(vec![vec![vec![0.0]], vec![vec![1.0]], vec![vec![10.0]]], 1.0);
        let p = infer(&[0.2], &m, &MagnetConfig::new(1.0, Some(2)).unwrap());
        assert_eq!(p.probabilities[2], 0.0);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(MagnetConfig::new(1.0, Some(4)).unwrap().validate_for(&m).is_err());
        assert!(MagnetConfig::new(1.0, Some(0)).is_err());
        assert!(MagnetConfig::new(-1.0, None).is_err());
    }

    #[test]
    fn cross_entropy_hand_cases() {
        let (l, _) = cross_entropy(&[0.25; 4], Target::Label(2)).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);

        let (l, g) = cross_entropy(&[1.0, 0.0], Target::Label(0)).unwrap();
        assert!((l - 1e-12).abs() < 1e-15);
        assert_eq!(g, vec![0.0, 0.0]);

        let p = [0.2, 0.3, 0.5];
        let (l, _) = cross_entropy(&p, Target::Distribution(&p)).unwrap();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((l - h).abs() < 1e-15);

        assert!(cross_entropy(&p, Target::Label(3)).is_err());
        assert!(softmax_cross_entropy(&p, 5).is_err());
        let (l, g) = softmax_cross_entropy(&[0.0, 0.0], 1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn soft_nll_matches_probability_cross_entropy() {
        let m = model(vec![vec![vec![0.0, 0.0], vec![1.0, 0.5]], vec![vec![0.0, 2.0]], vec![vec![2.0, 2.0]]], 0.7);
        let f = [0.3, 0.9];
        let p = infer(&f, &m, &MagnetConfig::default());
        for y in 0..3 {
            let (a, _) = soft_nll(&f, &m, &MagnetConfig::default(), Target::Label(y)).unwrap();
            let (b, _) = cross_entropy(&p.probabilities, Target::Label(y)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }
}
