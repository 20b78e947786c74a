//! Projected gradient attacks on clustering classifiers.
//!
//! Every attack uses restart 0 as a noise-free anchor that starts at the
//! clean input. The remaining restarts start from uniform noise. An attack
//! succeeds as soon as any visited iterate is classified differently from
//! `y`, so a longer attack with the same seed is never weaker than a
//! shorter one.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterId, ClusterModel};
use crate::datasets::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::metric::{infer, magnet_term, soft_nll, MagnetConfig, Target};
use crate::nn::DenseNet;
use crate::seed::{self, stage};
use crate::vecops::norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy of the soft prediction against the label.
    CeVsLabel,
    /// Cross-entropy against the clean input's soft prediction.
    CeVsCleanProbs,
    /// The per-instance Magnet term (adaptive attack).
    MagnetLoss,
}

/// How an iterate is classified when checking for success.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionRule {
    SoftArgmax,
    NearestCentroid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub eta: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub objective: Objective,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidInput(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidInput(format!("eta must be finite and > 0, got {}", self.eta)));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::InvalidInput("iterations and restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub success: bool,
    pub objective: f64,
    /// Steps taken in the restart that flipped the prediction.
    pub iterations_to_flip: Option<usize>,
    pub restart: usize,
}

pub fn pgd(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    x: &[f64],
    y: usize,
    atk: &AttackConfig,
) -> Result<AttackResult> {
    pgd_with_rule(net, model, cfg, x, y, atk, DecisionRule::SoftArgmax)
}

struct Evaluator<'a> {
    net: &'a DenseNet,
    model: &'a ClusterModel,
    cfg: &'a MagnetConfig,
    y: usize,
    objective: Objective,
    clean_probs: Vec<f64>,
    assigned: ClusterId,
    rule: DecisionRule,
}

impl Evaluator<'_> {
    /// Returns (objective, input gradient, predicted class).
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>, usize)> {
        let mut pred = 0;
        let (value, grad) = self.net.backward_with(x, None, |f| {
            pred = match self.rule {
                DecisionRule::SoftArgmax => infer(f, self.model, self.cfg).predicted_class,
                DecisionRule::NearestCentroid => self.model.predict_nearest(f),
            };
            match self.objective {
                Objective::CeVsLabel => soft_nll(f, self.model, self.cfg, Target::Label(self.y)),
                Objective::CeVsCleanProbs => {
                    soft_nll(f, self.model, self.cfg, Target::Distribution(&self.clean_probs))
                }
                Objective::MagnetLoss => magnet_term(f, self.assigned, self.model, self.cfg.alpha),
            }
        })?;
        Ok((value, grad, pred))
    }
}

fn check_input(net: &DenseNet, x: &[f64]) -> Result<()> {
    check_dim(net.input_dim(), x.len())?;
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("attack input must lie in the unit box".into()));
    }
    Ok(())
}

fn clip_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Projects `z` onto `{|z - x|_inf <= eps} ∩ [0,1]^n`.
fn project_linf(z: &mut [f64], x: &[f64], eps: f64) {
    for (zi, &xi) in z.iter_mut().zip(x) {
        let lo = (xi - eps).max(0.0);
        let hi = (xi + eps).min(1.0);
        *zi = zi.clamp(lo, hi);
    }
}

/// Projects `z` onto the l2 ball around `x`, then clips into the unit box.
/// Clipping towards `x` can only shrink the distance, so both constraints hold.
fn project_l2(z: &mut [f64], x: &[f64], eps: f64) {
    let delta: Vec<f64> = z.iter().zip(x).map(|(a, b)| a - b).collect();
    let n = norm(&delta);
    let mut scale = if n > eps { eps / n } else { 1.0 };
    // Rounding can overshoot the radius by an ulp; shrink until it holds.
    let mut shrink = 1e-15;
    loop {
        for ((zi, &xi), d) in z.iter_mut().zip(x).zip(&delta) {
            *zi = clip_unit(xi + d * scale);
        }
        let moved: Vec<f64> = z.iter().zip(x).map(|(a, b)| a - b).collect();
        if norm(&moved) <= eps {
            return;
        }
        scale *= 1.0 - shrink;
        shrink = (shrink * 2.0).min(1.0);
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn initial_point(x: &[f64], atk: &AttackConfig, restart: usize) -> Vec<f64> {
    if restart == 0 || atk.epsilon == 0.0 {
        return x.to_vec();
    }
    let mut rng = seed::rng(seed::derive(atk.seed, stage::ATTACK_RESTART, &[restart as u64]));
    let eps = atk.epsilon;
    let mut z: Vec<f64> = x.iter().map(|&xi| xi + rng.random_range(-eps..=eps)).collect();
    match atk.norm {
        Norm::Linf => project_linf(&mut z, x, eps),
        Norm::L2 => project_l2(&mut z, x, eps),
    }
    z
}

fn step(z: &mut [f64], grad: &[f64], x: &[f64], atk: &AttackConfig) {
    match atk.norm {
        Norm::Linf => {
            for (zi, &g) in z.iter_mut().zip(grad) {
                *zi += atk.eta * sign(g);
            }
            project_linf(z, x, atk.epsilon);
        }
        Norm::L2 => {
            let gn = norm(grad);
            if gn > 0.0 {
                for (zi, &g) in z.iter_mut().zip(grad) {
                    *zi += atk.eta * g / gn;
                }
            }
            project_l2(z, x, atk.epsilon);
        }
    }
}

/// PGD with an explicit success criterion. Returns the first iterate that
/// changes the decision, or else the highest-objective iterate seen.
pub fn pgd_with_rule(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    x: &[f64],
    y: usize,
    atk: &AttackConfig,
    rule: DecisionRule,
) -> Result<AttackResult> {
    atk.validate()?;
    check_input(net, x)?;
    cfg.validate_for(model)?;
    if y >= model.num_classes() {
        return Err(Error::InvalidInput(format!("label {y} out of range")));
    }
    let clean_feature = net.forward(x)?;
    let ev = Evaluator {
        net,
        model,
        cfg,
        y,
        objective: atk.objective,
        clean_probs: infer(&clean_feature, model, cfg).probabilities,
        assigned: model.nearest_in_class(&clean_feature, y).0,
        rule,
    };

    let mut best: Option<AttackResult> = None;
    for r in 0..atk.restarts {
        let mut z = initial_point(x, atk, r);
        for k in 0..=atk.iterations {
            let (value, grad, pred) = ev.eval(&z)?;
            if pred != y {
                return Ok(AttackResult { x_adv: z, success: true, objective: value, iterations_to_flip: Some(k), restart: r });
            }
            if best.as_ref().is_none_or(|b| value > b.objective) {
                best = Some(AttackResult { x_adv: z.clone(), success: false, objective: value, iterations_to_flip: None, restart: r });
            }
            if k == atk.iterations || atk.epsilon == 0.0 {
                break;
            }
            step(&mut z, &grad, x, atk);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One uniformly initialized signed-gradient step on the consistency
/// cross-entropy against the clean soft prediction (held constant).
pub fn qtrades_adversary(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    x: &[f64],
    epsilon: f64,
    eta: f64,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    check_input(net, x)?;
    if !(epsilon >= 0.0) || !epsilon.is_finite() || !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidInput("qtrades epsilon and eta must be finite and >= 0".into()));
    }
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let clean = infer(&net.forward(x)?, model, cfg).probabilities;
    let mut rng = seed::rng(rng_seed);
    let mut z: Vec<f64> = x.iter().map(|&xi| clip_unit(xi + rng.random_range(-epsilon..=epsilon))).collect();
    let (_, grad) = net.backward_with(&z, None, |f| soft_nll(f, model, cfg, Target::Distribution(&clean)))?;
    for (zi, &g) in z.iter_mut().zip(&grad) {
        *zi += eta * sign(g);
    }
    project_linf(&mut z, x, epsilon);
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracy {
    pub epsilon: f64,
    pub total: usize,
    pub robust: usize,
    pub accuracy: f64,
    /// Mean steps to the first flip over the attacked instances that flipped.
    pub mean_iterations_to_flip: Option<f64>,
}

fn instance_config(atk: &AttackConfig, i: usize) -> AttackConfig {
    AttackConfig { seed: seed::derive(atk.seed, stage::ATTACK_INSTANCE, &[i as u64]), ..atk.clone() }
}

/// Fraction of instances still classified correctly after every restart
/// of the attack fails.
pub fn evaluate_robust_accuracy(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    data: &LabeledDataset,
    atk: &AttackConfig,
) -> Result<RobustAccuracy> {
    let mut rows = robust_accuracy_sweep(net, model, cfg, data, atk, &[atk.epsilon])?;
    Ok(rows.remove(0))
}

/// Robust accuracy over an ascending grid of budgets. An instance counts as
/// robust at `eps` only if the attack failed at every budget up to `eps`,
/// which makes the curve non-increasing.
pub fn robust_accuracy_sweep(
    net: &DenseNet,
    model: &ClusterModel,
    cfg: &MagnetConfig,
    data: &LabeledDataset,
    base: &AttackConfig,
    epsilons: &[f64],
) -> Result<Vec<RobustAccuracy>> {
    if epsilons.is_empty() {
        return Err(Error::InvalidInput("empty epsilon grid".into()));
    }
    if epsilons.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidInput("epsilon grid must be ascending".into()));
    }
    for &eps in epsilons {
        AttackConfig { epsilon: eps, ..base.clone() }.validate()?;
    }
    check_dim(net.input_dim(), data.input_dim())?;

    let per_instance: Vec<Vec<Option<usize>>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = &data.inputs()[i];
            let y = data.labels()[i];
            let atk = instance_config(base, i);
            epsilons
                .iter()
                .map(|&eps| {
                    let res = pgd(net, model, cfg, x, y, &AttackConfig { epsilon: eps, ..atk.clone() })?;
                    Ok(res.iterations_to_flip)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let total = data.len();
    Ok(epsilons
        .iter()
        .enumerate()
        .map(|(j, &eps)| {
            let robust = per_instance.iter().filter(|flips| flips[..=j].iter().all(Option::is_none)).count();
            let flipped: Vec<usize> = per_instance.iter().filter_map(|flips| flips[j]).collect();
            let mean = if flipped.is_empty() {
                None
            } else {
                Some(flipped.iter().sum::<usize>() as f64 / flipped.len() as f64)
            };
            RobustAccuracy {
                epsilon: eps,
                total,
                robust,
                accuracy: if total == 0 { 0.0 } else { robust as f64 / total as f64 },
                mean_iterations_to_flip: mean,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};

    fn linear_1d(w: f64) -> DenseNet {
        DenseNet::new(vec![Dense::from_flat(1, 1, vec![w], vec![0.0], Activation::Identity).unwrap()]).unwrap()
    }

    fn two_centroids(a: f64, b: f64) -> ClusterModel {
        ClusterModel::new(vec![vec![vec![a]], vec![vec![b]]], vec![], 1.0).unwrap()
    }

    fn atk(norm: Norm, eps: f64, eta: f64, k: usize, r: usize) -> AttackConfig {
        AttackConfig { norm, epsilon: eps, eta, iterations: k, restarts: r, objective: Objective::CeVsLabel, seed: 7 }
    }

    #[test]
    fn zero_budget_returns_input() {
        let net = linear_1d(1.0);
        let m = two_centroids(0.0, 1.0);
        let cfg = MagnetConfig::default();
        let r = pgd(&net, &m, &cfg, &[0.2], 0, &atk(Norm::Linf, 0.0, 0.1, 5, 3)).unwrap();
        assert_eq!(r.x_adv, vec![0.2]);
        assert!(!r.success);
        let r = pgd(&net, &m, &cfg, &[0.2], 1, &atk(Norm::Linf, 0.0, 0.1, 5, 3)).unwrap();
        assert!(r.success);
    }

    #[test]
    fn one_step_moves_towards_loss_increase() {
        let net = linear_1d(1.0);
        let m = two_centroids(0.0, 10.0);
        let cfg = MagnetConfig::default();
        // The loss of label 0 grows towards the class-1 centroid.
        let r = pgd(&net, &m, &cfg, &[0.4], 0, &atk(Norm::Linf, 0.1, 0.1, 1, 1)).unwrap();
        assert_eq!(r.x_adv, vec![0.5]);
        let m2 = two_centroids(-10.0, 0.0);
        let r = pgd(&net, &m2, &cfg, &[0.4], 1, &atk(Norm::Linf, 0.1, 0.1, 1, 1)).unwrap();
        assert_eq!(r.x_adv, vec![0.30000000000000004]);
        let r = pgd(&net, &m, &cfg, &[0.98], 0, &atk(Norm::Linf, 0.1, 0.1, 1, 1)).unwrap();
        assert_eq!(r.x_adv, vec![1.0]);
    }

    #[test]
    fn zero_gradient_keeps_initial_point() {
        let net = linear_1d(0.0);
        let m = two_centroids(-1.0, 1.0);
        let cfg = MagnetConfig::default();
        let a = atk(Norm::Linf, 0.1, 0.05, 10, 1);
        let r = pgd(&net, &m, &cfg, &[0.5], 0, &a).unwrap();
        assert_eq!(r.x_adv, vec![0.5]);
    }

    #[test]
    fn l2_projection_is_exact() {
        let x = [0.5, 0.5, 0.02];
        for eps in [1e-3, 0.1, 0.3, 0.7] {
            let mut z = vec![0.9, -0.4, 0.3];
            project_l2(&mut z, &x, eps);
            let d: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
            assert!(norm(&d) <= eps);
            assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn qtrades_zero_budget_is_identity() {
        let net = DenseNet::init(&[2, 4, 2], 1).unwrap();
        let m = ClusterModel::new(vec![vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]], vec![], 1.0).unwrap();
        let cfg = MagnetConfig::default();
        assert_eq!(qtrades_adversary(&net, &m, &cfg, &[0.3, 0.9], 0.0, 0.1, 3).unwrap(), vec![0.3, 0.9]);
    }

    #[test]
    fn robust_accuracy_margin_case() {
        let net = linear_1d(1.0);
        let m = two_centroids(0.2, 0.8);
        let cfg = MagnetConfig::default();
        let data = LabeledDataset::new(vec![vec![0.1], vec![0.3], vec![0.7], vec![0.9]], vec![0, 0, 1, 1], 2).unwrap();
        let a = atk(Norm::Linf, 0.15, 0.05, 10, 3);
        let r = evaluate_robust_accuracy(&net, &m, &cfg, &data, &a).unwrap();
        assert_eq!(r.robust, 4);
        let a = atk(Norm::Linf, 0.25, 0.05, 10, 3);
        let r = evaluate_robust_accuracy(&net, &m, &cfg, &data, &a).unwrap();
        assert_eq!(r.robust, 2);
    }

    #[test]
    fn rejects_bad_config() {
        let net = linear_1d(1.0);
        let m = two_centroids(0.0, 1.0);
        let cfg = MagnetConfig::default();
        assert!(pgd(&net, &m, &cfg, &[0.5], 0, &atk(Norm::Linf, -0.1, 0.1, 1, 1)).is_err());
        assert!(pgd(&net, &m, &cfg, &[1.5], 0, &atk(Norm::Linf, 0.1, 0.1, 1, 1)).is_err());
        assert!(pgd(&net, &m, &cfg, &[0.5], 0, &atk(Norm::Linf, 0.1, 0.1, 0, 1)).is_err());
    }
}
