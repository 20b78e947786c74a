//! K-means with K-means++ seeding and the per-class centroid model that
//! serves as the classifier head.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{check_dim, Error, Result};
use crate::nn::DenseNet;
use crate::seed::{self, stage};
use crate::vecops::sq_dist;

/// Lower bound on the shared variance used by the Magnet Loss and soft
/// inference.
pub const SIGMA_SQ_FLOOR: f64 = 1e-6;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_RESTARTS: usize = 10;

/// Identifies centroid `cluster` of class `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterId {
    pub class: usize,
    pub cluster: usize,
}

/// Per-class centroid sets plus the global variance estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ClusterModelRecord", try_from = "ClusterModelRecord")]
pub struct ClusterModel {
    centroids: Vec<Vec<Vec<f64>>>,
    assignments: Vec<ClusterId>,
    sigma_sq: f64,
    feature_dim: usize,
}

impl ClusterModel {
    /// `centroids[c][j]` is centroid `j` of class `c`. `assignments` may be
    /// empty (e.g. a model built by hand for inference only).
    pub fn new(centroids: Vec<Vec<Vec<f64>>>, assignments: Vec<ClusterId>, sigma_sq: f64) -> Result<Self> {
        let feature_dim = centroids
            .first()
            .and_then(|c| c.first())
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("cluster model needs at least one centroid".into()))?;
        if feature_dim == 0 {
            return Err(Error::InvalidInput("zero feature dimension".into()));
        }
        for (c, cs) in centroids.iter().enumerate() {
            if cs.is_empty() {
                return Err(Error::InvalidInput(format!("class {c} has no centroid")));
            }
            for mu in cs {
                check_dim(feature_dim, mu.len())?;
                if mu.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("class {c} has a non-finite centroid")));
                }
            }
        }
        for a in &assignments {
            if a.class >= centroids.len() || a.cluster >= centroids[a.class].len() {
                return Err(Error::InvalidInput(format!("assignment {a:?} out of range")));
            }
        }
        if !sigma_sq.is_finite() || sigma_sq < SIGMA_SQ_FLOOR {
            return Err(Error::InvalidInput(format!("sigma_sq {sigma_sq} below floor {SIGMA_SQ_FLOOR}")));
        }
        Ok(Self { centroids, assignments, sigma_sq, feature_dim })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn class_centroids(&self, class: usize) -> &[Vec<f64>] {
        &self.centroids[class]
    }

    pub fn centroid(&self, id: ClusterId) -> &[f64] {
        &self.centroids[id.class][id.cluster]
    }

    pub fn centroids(&self) -> &[Vec<Vec<f64>>] {
        &self.centroids
    }

    pub fn assignments(&self) -> &[ClusterId] {
        &self.assignments
    }

    pub fn k_per_class(&self) -> Vec<usize> {
        self.centroids.iter().map(Vec::len).collect()
    }

    pub fn total_clusters(&self) -> usize {
        self.centroids.iter().map(Vec::len).sum()
    }

    /// All clusters in (class, cluster) order.
    pub fn iter(&self) -> impl Iterator<Item = (ClusterId, &[f64])> {
        self.centroids.iter().enumerate().flat_map(|(class, cs)| {
            cs.iter()
                .enumerate()
                .map(move |(cluster, mu)| (ClusterId { class, cluster }, mu.as_slice()))
        })
    }

    /// Nearest centroid and its squared distance; ties go to the lowest
    /// (class, cluster).
    pub fn nearest(&self, feature: &[f64]) -> (ClusterId, f64) {
        let mut best = (ClusterId { class: 0, cluster: 0 }, f64::INFINITY);
        for (id, mu) in self.iter() {
            let d = sq_dist(feature, mu);
            if d < best.1 {
                best = (id, d);
            }
        }
        best
    }

    /// Nearest centroid of a given class.
    pub fn nearest_in_class(&self, feature: &[f64], class: usize) -> (ClusterId, f64) {
        let mut best = (ClusterId { class, cluster: 0 }, f64::INFINITY);
        for (j, mu) in self.centroids[class].iter().enumerate() {
            let d = sq_dist(feature, mu);
            if d < best.1 {
                best = (ClusterId { class, cluster: j }, d);
            }
        }
        best
    }

    /// Hard nearest-centroid class prediction.
    pub fn predict_nearest(&self, feature: &[f64]) -> usize {
        self.nearest(feature).0.class
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterModelRecord {
    feature_dim: usize,
    sigma_sq: f64,
    k_per_class: Vec<usize>,
    centroids: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    assignments: Vec<ClusterId>,
}

impl From<ClusterModel> for ClusterModelRecord {
    fn from(m: ClusterModel) -> Self {
        Self {
            feature_dim: m.feature_dim,
            sigma_sq: m.sigma_sq,
            k_per_class: m.k_per_class(),
            centroids: m.centroids,
            assignments: m.assignments,
        }
    }
}

impl TryFrom<ClusterModelRecord> for ClusterModel {
    type Error = Error;

    fn try_from(r: ClusterModelRecord) -> Result<Self> {
        let m = ClusterModel::new(r.centroids, r.assignments, r.sigma_sq)?;
        check_dim(r.feature_dim, m.feature_dim)?;
        if r.k_per_class != m.k_per_class() {
            return Err(Error::InvalidInput("k_per_class does not match centroid arrays".into()));
        }
        Ok(m)
    }
}

/// Output of [`lloyd`].
#[derive(Clone, Debug, PartialEq)]
pub struct LloydResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every mean update, followed by the final value.
    pub inertia_history: Vec<f64>,
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    distinct.len()
}

/// K-means++ seeding: the first centroid uniformly, each next one with
/// probability proportional to the squared distance to the nearest chosen
/// centroid.
pub fn kmeans_pp_init(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::Infeasible(format!("k = {k} exceeds {distinct} distinct points")));
    }
    let mut rng = seed::rng(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let sampler = WeightedIndex::new(&d2)
            .map_err(|e| Error::Infeasible(format!("k-means++ weights: {e}")))?;
        let next = points[sampler.sample(&mut rng)].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centroids.push(next);
    }
    Ok(centroids)
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its current centroid.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // only points whose cluster keeps at least one member are eligible
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let Some(i) = far else {
            return;
        };
        centroids[empty] = points[i].clone();
        assign[i] = empty;
    }
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn mean_update(points: &[Vec<f64>], assign: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = previous[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// Lloyd iterations from `init` until the largest centroid shift is below
/// `tol` or `max_iters` updates have run.
pub fn lloyd(points: &[Vec<f64>], init: &[Vec<f64>], max_iters: usize, tol: f64) -> Result<LloydResult> {
    if init.is_empty() {
        return Err(Error::InvalidInput("lloyd needs at least one centroid".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("lloyd needs at least one point".into()));
    }
    let dim = init[0].len();
    for p in points.iter().chain(init) {
        check_dim(dim, p.len())?;
    }

    let mut centroids = init.to_vec();
    let mut assign = assign_all(points, &centroids);
    repair_empty(points, &mut centroids, &mut assign);
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let updated = mean_update(points, &assign, &centroids);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(inertia(points, &centroids, &assign));
        assign = assign_all(points, &centroids);
        repair_empty(points, &mut centroids, &mut assign);
        if shift < tol {
            break;
        }
    }
    let final_inertia = inertia(points, &centroids, &assign);
    history.push(final_inertia);
    Ok(LloydResult { centroids, assignment: assign, inertia: final_inertia, inertia_history: history })
}

/// Best (lowest inertia) of `restarts` K-means++ + Lloyd runs. Restart `r`
/// is seeded with `derive(seed, KMEANS_RESTART, [r])`.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<LloydResult> {
    let mut best: Option<LloydResult> = None;
    for r in 0..restarts.max(1) {
        let init = kmeans_pp_init(points, k, seed::derive(seed, stage::KMEANS_RESTART, &[r as u64]))?;
        let res = lloyd(points, &init, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `sum ||f_i - mu(x_i)||^2 / (N - 1)`, clamped to [`SIGMA_SQ_FLOOR`].
pub fn sigma_sq_estimate(residual_sq_sum: f64, n: usize) -> f64 {
    if n < 2 {
        return SIGMA_SQ_FLOOR;
    }
    (residual_sq_sum / (n - 1) as f64).max(SIGMA_SQ_FLOOR)
}

/// Clusters precomputed features class by class. Class `c` uses seed
/// `derive(seed, KMEANS_CLASS, [c])`.
pub fn cluster_features(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    k_per_class: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterModel> {
    check_dim(features.len(), labels.len())?;
    if k_per_class == 0 {
        return Err(Error::InvalidInput("k_per_class must be at least 1".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidInput(format!("label {y} out of range")));
        }
        members[y].push(i);
    }
    let mut centroids = Vec::with_capacity(num_classes);
    let mut assignments = vec![ClusterId { class: 0, cluster: 0 }; features.len()];
    let mut residual = 0.0;
    for (c, idx) in members.iter().enumerate() {
        if idx.len() < k_per_class {
            return Err(Error::Infeasible(format!(
                "class {c} has {} instances, fewer than k_per_class = {k_per_class}",
                idx.len()
            )));
        }
        let pts: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
        let res = kmeans(&pts, k_per_class, restarts, seed::derive(seed, stage::KMEANS_CLASS, &[c as u64]))?;
        for (&i, &a) in idx.iter().zip(&res.assignment) {
            assignments[i] = ClusterId { class: c, cluster: a };
        }
        residual += res.inertia;
        centroids.push(res.centroids);
    }
    let sigma_sq = sigma_sq_estimate(residual, features.len());
    ClusterModel::new(centroids, assignments, sigma_sq)
}

/// Recomputes per-class centroids on the network's current features.
pub fn refresh_clusters(
    net: &DenseNet,
    data: &LabeledDataset,
    k_per_class: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let features = data
        .inputs()
        .iter()
        .map(|x| net.forward(x))
        .collect::<Result<Vec<_>>>()?;
    cluster_features(&features, data.labels(), data.num_classes(), k_per_class, restarts, seed)
}
