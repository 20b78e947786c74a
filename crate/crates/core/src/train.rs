//! Training pipelines: nominal cross-entropy, Magnet Loss from scratch,
//! ClusTR (cross-entropy warm start, then Magnet fine-tuning without the
//! head) and ClusTR with the QTRADES consistency term.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{refresh_clusters, ClusterId, ClusterModel, DEFAULT_RESTARTS};
use crate::datasets::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::metric::{infer, magnet_term, soft_nll, softmax_cross_entropy, MagnetConfig, Target};
use crate::nn::DenseNet;
use crate::attacks::qtrades_adversary;
use crate::seed::{self, stage};
use crate::vecops::{argmax, norm, sq_dist};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Nominal,
    Magnet,
    Clustr,
    ClustrQtrades,
}

/// Feature network shape: `input -> hidden.. -> feature_dim`, ReLU between
/// layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: vec![20, 20], feature_dim: 2 }
    }
}

impl ArchConfig {
    pub fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut d = vec![input_dim];
        d.extend_from_slice(&self.hidden);
        d.push(self.feature_dim);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("arch dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    /// Cross-entropy epochs. The nominal pipeline trains only this phase;
    /// the magnet pipeline ignores it.
    #[serde(default = "defaults::warm_epochs")]
    pub warm_epochs: usize,
    #[serde(default = "defaults::finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "defaults::warm_lr")]
    pub warm_lr: f64,
    #[serde(default = "defaults::finetune_lr")]
    pub finetune_lr: f64,
    /// Mini-batch size of the cross-entropy phase.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub d_nearest: Option<usize>,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::k_per_class")]
    pub k_per_class: usize,
    #[serde(default = "defaults::kmeans_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "defaults::clusters_per_batch")]
    pub clusters_per_batch: usize,
    #[serde(default = "defaults::samples_per_cluster")]
    pub samples_per_cluster: usize,
    #[serde(default = "defaults::qtrades_epsilon")]
    pub qtrades_epsilon: f64,
    #[serde(default = "defaults::qtrades_eta")]
    pub qtrades_eta: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn warm_epochs() -> usize {
        60
    }
    pub fn finetune_epochs() -> usize {
        200
    }
    pub fn warm_lr() -> f64 {
        1e-2
    }
    pub fn finetune_lr() -> f64 {
        3e-3
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn k_per_class() -> usize {
        1
    }
    pub fn kmeans_restarts() -> usize {
        super::DEFAULT_RESTARTS
    }
    pub fn clusters_per_batch() -> usize {
        4
    }
    pub fn samples_per_cluster() -> usize {
        8
    }
    pub fn qtrades_epsilon() -> f64 {
        0.05
    }
    pub fn qtrades_eta() -> f64 {
        0.05
    }
    pub fn grad_clip() -> f64 {
        10.0
    }
}

impl TrainConfig {
    pub fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline,
            warm_epochs: defaults::warm_epochs(),
            finetune_epochs: defaults::finetune_epochs(),
            warm_lr: defaults::warm_lr(),
            finetune_lr: defaults::finetune_lr(),
            batch_size: defaults::batch_size(),
            alpha: defaults::alpha(),
            d_nearest: None,
            lambda: defaults::lambda(),
            k_per_class: defaults::k_per_class(),
            kmeans_restarts: defaults::kmeans_restarts(),
            clusters_per_batch: defaults::clusters_per_batch(),
            samples_per_cluster: defaults::samples_per_cluster(),
            qtrades_epsilon: defaults::qtrades_epsilon(),
            qtrades_eta: defaults::qtrades_eta(),
            grad_clip: defaults::grad_clip(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn magnet_config(&self) -> MagnetConfig {
        MagnetConfig { alpha: self.alpha, d_nearest: self.d_nearest }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be finite and > 0, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be finite and >= 0, got {v}")))
            }
        };
        positive("warm_lr", self.warm_lr)?;
        positive("finetune_lr", self.finetune_lr)?;
        positive("grad_clip", self.grad_clip)?;
        positive("adam.epsilon", self.adam.epsilon)?;
        non_negative("lambda", self.lambda)?;
        non_negative("qtrades_epsilon", self.qtrades_epsilon)?;
        non_negative("qtrades_eta", self.qtrades_eta)?;
        if !self.alpha.is_finite() {
            return Err(Error::Config("train.alpha must be finite".into()));
        }
        for (name, b) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.k_per_class == 0 || self.kmeans_restarts == 0 {
            return Err(Error::Config("train.k_per_class and train.kmeans_restarts must be >= 1".into()));
        }
        if self.clusters_per_batch < 2 {
            return Err(Error::Config("train.clusters_per_batch must be >= 2".into()));
        }
        if self.samples_per_cluster < 2 {
            return Err(Error::Config("train.samples_per_cluster must be >= 2".into()));
        }
        if self.d_nearest == Some(0) {
            return Err(Error::Config("train.d_nearest must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self { lr, cfg, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.cfg.epsilon);
        }
    }
}

fn clip_grad(grad: &mut [f64], max_norm: f64) {
    let n = norm(grad);
    if n > max_norm {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn apply_step(net: &mut DenseNet, opt: &mut Adam, grad: &mut [f64], clip: f64) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::DegenerateModel("non-finite gradient".into()));
    }
    clip_grad(grad, clip);
    let mut p = net.params();
    opt.step(&mut p, grad);
    net.set_params(&p)
        .map_err(|_| Error::DegenerateModel("optimizer produced non-finite parameters".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warm,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    /// Training accuracy after the epoch.
    pub accuracy: f64,
}

/// Result of a training run. Clustering pipelines store the feature network
/// without its head plus the cluster model of the final refresh; the
/// nominal pipeline stores the network with its linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedArtifact {
    pub net: DenseNet,
    pub cluster_model: Option<ClusterModel>,
    pub magnet: MagnetConfig,
    pub history: Vec<EpochRecord>,
    pub arch: ArchConfig,
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainedArtifact {
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let out = self.net.forward(x)?;
        Ok(match &self.cluster_model {
            Some(m) => infer(&out, m, &self.magnet).predicted_class,
            None => argmax(&out),
        })
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for (x, y) in data.iter() {
            if self.predict(x)? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// The cluster model, or an error for a nominal artifact.
    pub fn clusters(&self) -> Result<&ClusterModel> {
        self.cluster_model
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("artifact has no cluster model (nominal pipeline)".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(s)?;
        if let Some(m) = &a.cluster_model {
            check_dim(a.net.output_dim(), m.feature_dim())?;
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn check_data(data: &LabeledDataset) -> Result<()> {
    if data.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateModel("training data must contain at least two classes".into()));
    }
    Ok(())
}

fn init_nets(data: &LabeledDataset, arch: &ArchConfig, seed: u64) -> Result<(DenseNet, DenseNet)> {
    arch.validate()?;
    let features = DenseNet::init(&arch.dims(data.input_dim()), seed::derive(seed, stage::INIT, &[]))?;
    let head = DenseNet::init(&[arch.feature_dim, data.num_classes()], seed::derive(seed, stage::HEAD, &[]))?;
    Ok((features, head))
}

/// Mean softmax cross-entropy and accuracy of a network with a linear head.
pub fn nominal_loss(net: &DenseNet, data: &LabeledDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut hits = 0;
    for (x, y) in data.iter() {
        let logits = net.forward(x)?;
        loss += softmax_cross_entropy(&logits, y)?.0;
        if argmax(&logits) == y {
            hits += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Mini-batch cross-entropy training of `net` (which must end in the
/// classification head) for `epochs` epochs.
fn cross_entropy_phase(
    net: &mut DenseNet,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    epochs: usize,
    history: &mut Vec<EpochRecord>,
) -> Result<()> {
    let mut opt = Adam::new(net.num_params(), cfg.warm_lr, cfg.adam.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = seed::rng(seed::derive(cfg.seed, stage::WARM_SHUFFLE, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len() as f64;
            let mut grad = vec![0.0; net.num_params()];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let y = data.labels()[i];
                let (l, _) = net.backward_with(&data.inputs()[i], Some(&mut grad), |logits| {
                    let (l, g) = softmax_cross_entropy(logits, y)?;
                    Ok((l, g.into_iter().map(|v| v / b).collect()))
                })?;
                batch_loss += l;
            }
            apply_step(net, &mut opt, &mut grad, cfg.grad_clip)?;
            total += batch_loss / b;
            batches += 1;
        }
        let (_, accuracy) = nominal_loss(net, data)?;
        history.push(EpochRecord { phase: Phase::Warm, epoch, loss: total / batches.max(1) as f64, accuracy });
    }
    Ok(())
}

/// Cross-entropy training of the feature network plus a linear head.
/// Trains for `cfg.warm_epochs` epochs at `cfg.warm_lr`.
pub fn train_nominal(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedArtifact> {
    cfg.validate()?;
    check_data(data)?;
    let (features, head) = init_nets(data, arch, cfg.seed)?;
    let mut net = features.with_head(head.layers()[0].clone())?;
    let mut history = Vec::new();
    cross_entropy_phase(&mut net, data, cfg, cfg.warm_epochs, &mut history)?;
    Ok(TrainedArtifact {
        net,
        cluster_model: None,
        magnet: cfg.magnet_config(),
        history,
        arch: arch.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
    })
}

/// Draws neighborhood batches: a uniformly chosen seed cluster, its nearest
/// clusters by centroid distance (at least one of another class) and
/// `samples_per_cluster` members of each.
struct NeighborhoodSampler {
    ids: Vec<ClusterId>,
    members: Vec<Vec<usize>>,
    /// For each cluster, the other clusters ordered by centroid distance.
    neighbors: Vec<Vec<usize>>,
    clusters_per_batch: usize,
    samples_per_cluster: usize,
}

impl NeighborhoodSampler {
    fn new(model: &ClusterModel, clusters_per_batch: usize, samples_per_cluster: usize) -> Result<Self> {
        let ids: Vec<ClusterId> = model.iter().map(|(id, _)| id).collect();
        let mut members = vec![Vec::new(); ids.len()];
        for (i, a) in model.assignments().iter().enumerate() {
            let pos = ids.binary_search(a).map_err(|_| Error::InvalidInput("assignment outside model".into()))?;
            members[pos].push(i);
        }
        if members.iter().any(Vec::is_empty) {
            return Err(Error::Infeasible("a cluster has no training members".into()));
        }
        let neighbors = ids
            .iter()
            .enumerate()
            .map(|(s, &sid)| {
                let mut others: Vec<usize> = (0..ids.len()).filter(|&j| j != s).collect();
                let c = model.centroid(sid);
                others.sort_by(|&a, &b| {
                    sq_dist(c, model.centroid(ids[a]))
                        .total_cmp(&sq_dist(c, model.centroid(ids[b])))
                        .then(a.cmp(&b))
                });
                others
            })
            .collect();
        Ok(Self {
            clusters_per_batch: clusters_per_batch.min(ids.len()),
            ids,
            members,
            neighbors,
            samples_per_cluster,
        })
    }

    fn batch_size(&self) -> usize {
        self.clusters_per_batch * self.samples_per_cluster
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<(usize, ClusterId)> {
        let s = rng.random_range(0..self.ids.len());
        let mut chosen = vec![s];
        chosen.extend(self.neighbors[s].iter().take(self.clusters_per_batch - 1));
        if chosen.iter().all(|&c| self.ids[c].class == self.ids[s].class) {
            let foreign = *self.neighbors[s]
                .iter()
                .find(|&&c| self.ids[c].class != self.ids[s].class)
                .expect("model has at least two classes");
            *chosen.last_mut().expect("non-empty") = foreign;
        }
        let m = self.samples_per_cluster;
        let mut out = Vec::with_capacity(self.batch_size());
        for c in chosen {
            let mem = &self.members[c];
            if mem.len() >= m {
                out.extend(index::sample(rng, mem.len(), m).into_iter().map(|j| (mem[j], self.ids[c])));
            } else {
                out.extend((0..m).map(|_| (mem[rng.random_range(0..mem.len())], self.ids[c])));
            }
        }
        out
    }
}

fn cluster_accuracy(net: &DenseNet, model: &ClusterModel, cfg: &MagnetConfig, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0;
    for (x, y) in data.iter() {
        if infer(&net.forward(x)?, model, cfg).predicted_class == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Magnet fine-tuning of a head-less feature network, with the optional
/// QTRADES consistency term weighted by `lambda`.
fn finetune(
    net: &mut DenseNet,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    lambda: f64,
    history: &mut Vec<EpochRecord>,
) -> Result<ClusterModel> {
    let mcfg = cfg.magnet_config();
    mcfg.validate()?;
    for (c, &n) in data.class_counts().iter().enumerate() {
        if n < cfg.samples_per_cluster {
            return Err(Error::Infeasible(format!(
                "class {c} has {n} instances, fewer than samples_per_cluster = {}",
                cfg.samples_per_cluster
            )));
        }
    }
    let refresh = |net: &DenseNet, e: usize| {
        refresh_clusters(net, data, cfg.k_per_class, cfg.kmeans_restarts, seed::derive(cfg.seed, stage::REFRESH, &[e as u64]))
    };
    let mut model = refresh(net, 0)?;
    let mut opt = Adam::new(net.num_params(), cfg.finetune_lr, cfg.adam.clone());
    for epoch in 0..cfg.finetune_epochs {
        let sampler = NeighborhoodSampler::new(&model, cfg.clusters_per_batch, cfg.samples_per_cluster)?;
        let batch_size = sampler.batch_size();
        let num_batches = data.len().div_ceil(batch_size);
        let mut rng = seed::rng(seed::derive(cfg.seed, stage::SAMPLER, &[epoch as u64]));
        let mut total = 0.0;
        for bi in 0..num_batches {
            let batch = sampler.sample(&mut rng);
            let b = batch.len() as f64;
            let mut grad = vec![0.0; net.num_params()];
            let mut batch_loss = 0.0;
            for &(i, assigned) in &batch {
                net.backward_with(&data.inputs()[i], Some(&mut grad), |f| {
                    let (t, g) = magnet_term(f, assigned, &model, mcfg.alpha)?;
                    if t > 0.0 {
                        batch_loss += t / b;
                        Ok(((), g.into_iter().map(|v| v / b).collect()))
                    } else {
                        Ok(((), vec![0.0; f.len()]))
                    }
                })?;
            }
            if lambda > 0.0 {
                for (j, &(i, _)) in batch.iter().enumerate() {
                    let x = &data.inputs()[i];
                    let clean = infer(&net.forward(x)?, &model, &mcfg).probabilities;
                    let adv_seed = seed::derive(cfg.seed, stage::QTRADES, &[epoch as u64, bi as u64, j as u64]);
                    let x_adv = qtrades_adversary(net, &model, &mcfg, x, cfg.qtrades_epsilon, cfg.qtrades_eta, adv_seed)?;
                    net.backward_with(&x_adv, Some(&mut grad), |f| {
                        let (l, g) = soft_nll(f, &model, &mcfg, Target::Distribution(&clean))?;
                        batch_loss += lambda * l / b;
                        Ok(((), g.into_iter().map(|v| lambda * v / b).collect()))
                    })?;
                }
            }
            apply_step(net, &mut opt, &mut grad, cfg.grad_clip)?;
            total += batch_loss;
        }
        model = refresh(net, epoch + 1)?;
        let accuracy = cluster_accuracy(net, &model, &mcfg, data)?;
        history.push(EpochRecord { phase: Phase::Finetune, epoch, loss: total / num_batches as f64, accuracy });
    }
    Ok(model)
}

fn train_clustering(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig, lambda: f64) -> Result<TrainedArtifact> {
    cfg.validate()?;
    check_data(data)?;
    let warm_epochs = if cfg.pipeline == Pipeline::Magnet { 0 } else { cfg.warm_epochs };
    let (features, head) = init_nets(data, arch, cfg.seed)?;
    let mut history = Vec::new();
    let mut net = if warm_epochs > 0 {
        let mut full = features.with_head(head.layers()[0].clone())?;
        cross_entropy_phase(&mut full, data, cfg, warm_epochs, &mut history)?;
        full.without_head()?.0
    } else {
        features
    };
    let model = finetune(&mut net, data, cfg, lambda, &mut history)?;
    let mut config = cfg.clone();
    config.warm_epochs = warm_epochs;
    Ok(TrainedArtifact {
        net,
        cluster_model: Some(model),
        magnet: cfg.magnet_config(),
        history,
        arch: arch.clone(),
        config,
        seed: cfg.seed,
    })
}

/// Cross-entropy warm start for `warm_epochs` (0 gives the Magnet-only
/// pipeline), head removal, then Magnet fine-tuning with a cluster refresh
/// before every epoch and after the last one.
pub fn train_clustr(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedArtifact> {
    train_clustering(data, arch, cfg, 0.0)
}

/// As [`train_clustr`], plus `lambda` times the consistency cross-entropy
/// between the soft predictions at a one-step adversary and at the clean
/// input. The clean prediction is held constant.
pub fn train_clustr_qtrades(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedArtifact> {
    train_clustering(data, arch, cfg, cfg.lambda)
}

/// Runs the pipeline named in `cfg`.
pub fn train(data: &LabeledDataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainedArtifact> {
    match cfg.pipeline {
        Pipeline::Nominal => train_nominal(data, arch, cfg),
        Pipeline::Magnet | Pipeline::Clustr => train_clustr(data, arch, cfg),
        Pipeline::ClustrQtrades => train_clustr_qtrades(data, arch, cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ce_accuracy: f64,
    pub cluster_accuracy: f64,
}

/// Trains a nominal model, then replaces its head by K-means clusters of the
/// penultimate features and compares the two classifiers on `eval`.
pub fn ce_head_cluster_ablation(
    train_data: &LabeledDataset,
    eval: &LabeledDataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    let nominal = train_nominal(train_data, arch, cfg)?;
    let ce_accuracy = nominal.accuracy(eval)?;
    let (features, _) = nominal.net.without_head()?;
    let model = refresh_clusters(
        &features,
        train_data,
        cfg.k_per_class,
        cfg.kmeans_restarts,
        seed::derive(cfg.seed, stage::REFRESH, &[0]),
    )?;
    let cluster_accuracy = cluster_accuracy(&features, &model, &cfg.magnet_config(), eval)?;
    Ok(AblationReport { ce_accuracy, cluster_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::gen_moons;

    #[test]
    fn zero_epochs_keep_initialization() {
        let data = gen_moons(40, 0.1, 1).unwrap();
        let arch = ArchConfig::default();
        let mut cfg = TrainConfig::new(Pipeline::Nominal);
        cfg.warm_epochs = 0;
        let a = train_nominal(&data, &arch, &cfg).unwrap();
        let (f, h) = init_nets(&data, &arch, 0).unwrap();
        assert_eq!(a.net, f.with_head(h.layers()[0].clone()).unwrap());
        assert!(a.history.is_empty());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Adam::new(2, 0.1, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![30.0, 40.0];
        clip_grad(&mut g, 10.0);
        assert!((norm(&g) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_batches_span_two_classes() {
        let centroids = vec![vec![vec![0.0], vec![1.0], vec![2.0]], vec![vec![10.0]]];
        let assignments = (0..40)
            .map(|i| if i < 30 { ClusterId { class: 0, cluster: i % 3 } } else { ClusterId { class: 1, cluster: 0 } })
            .collect();
        let model = ClusterModel::new(centroids, assignments, 1.0).unwrap();
        let s = NeighborhoodSampler::new(&model, 3, 4).unwrap();
        let mut rng = seed::rng(3);
        for _ in 0..50 {
            let b = s.sample(&mut rng);
            assert_eq!(b.len(), 12);
            assert!(b.iter().any(|(_, id)| id.class == 0) && b.iter().any(|(_, id)| id.class == 1));
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let data = LabeledDataset::new(vec![vec![0.1], vec![0.2]], vec![0, 0], 2).unwrap();
        let cfg = TrainConfig::new(Pipeline::Nominal);
        assert!(matches!(train_nominal(&data, &ArchConfig::default(), &cfg), Err(Error::DegenerateModel(_))));
    }
}
