//! Synthetic 2-D binary tasks, stratified splits and CSV I/O.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed::{self, stage};

/// Margin kept between generated data and the unit-box faces.
pub const BOX_MARGIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Full,
    Train,
    Test,
}

/// Inputs in `[0, 1]^n` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    input_dim: usize,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_dim(inputs.len(), labels.len())?;
        let input_dim = inputs.first().map_or(0, Vec::len);
        for (i, x) in inputs.iter().enumerate() {
            check_dim(input_dim, x.len())?;
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("input {i} leaves the unit box")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!("label {y} >= num_classes {num_classes}")));
        }
        Ok(Self { inputs, labels, num_classes, input_dim, split: SplitTag::Full })
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    fn subset(&self, idx: &[usize], split: SplitTag) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            split,
        }
    }
}

/// Isotropic affine map of `points` into `[margin, 1 - margin]^2`, centered.
fn rescale_into_box(points: &mut [[f64; 2]]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points.iter() {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if span > 0.0 { (1.0 - 2.0 * BOX_MARGIN) / span } else { 0.0 };
    for p in points.iter_mut() {
        for a in 0..2 {
            let mid = 0.5 * (lo[a] + hi[a]);
            p[a] = (0.5 + (p[a] - mid) * scale).clamp(BOX_MARGIN, 1.0 - BOX_MARGIN);
        }
    }
}

fn noisy(points: &mut [[f64; 2]], noise_std: f64, seed: u64) -> Result<()> {
    if noise_std < 0.0 || !noise_std.is_finite() {
        return Err(Error::InvalidInput(format!("noise_std {noise_std} must be >= 0")));
    }
    if noise_std > 0.0 {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for p in points.iter_mut() {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    Ok(())
}

fn finish(mut points: Vec<[f64; 2]>, labels: Vec<usize>) -> Result<LabeledDataset> {
    rescale_into_box(&mut points);
    LabeledDataset::new(points.into_iter().map(|p| p.to_vec()).collect(), labels, 2)
}

/// Two interleaving half circles. Class 0 is the upper arc, class 1 the
/// lower one, `n / 2` points each, evenly spaced in angle before noise.
pub fn gen_moons(n: usize, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("moons need an even n >= 4, got {n}")));
    }
    let half = n / 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = PI * i as f64 / (half - 1) as f64;
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..half {
        let t = PI * i as f64 / (half - 1) as f64;
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    noisy(&mut points, noise_std, seed::derive(seed, stage::DATA, &[0]))?;
    finish(points, labels)
}

/// Two concentric rings of radius 1 (class 0) and `1 + gap` (class 1).
pub fn gen_circles(n: usize, gap: f64, noise_std: f64, seed: u64) -> Result<LabeledDataset> {
    if !(gap > 0.0) || !gap.is_finite() {
        return Err(Error::InvalidInput(format!("gap must be > 0, got {gap}")));
    }
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("circles need an even n >= 4, got {n}")));
    }
    let half = n / 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (class, radius) in [(0usize, 1.0), (1, 1.0 + gap)] {
        for i in 0..half {
            let t = 2.0 * PI * i as f64 / half as f64;
            points.push([radius * t.cos(), radius * t.sin()]);
            labels.push(class);
        }
    }
    noisy(&mut points, noise_std, seed::derive(seed, stage::DATA, &[1]))?;
    finish(points, labels)
}

/// Stratified split: each class sends `round(count * test_fraction)` of its
/// instances to the test side. Both sides keep the original order.
pub fn split(data: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidInput(format!("test_fraction {test_fraction} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed::derive(seed, stage::SPLIT, &[]));
    let mut is_test = vec![false; data.len()];
    for c in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..data.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..data.len()).filter(|&i| is_test[i]).collect();
    Ok((data.subset(&train, SplitTag::Train), data.subset(&test, SplitTag::Test)))
}

/// Writes `x_0, .., x_{n-1}, label` with shortest round-trip float formatting.
pub fn save_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..data.input_dim).map(|i| format!("x_{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (x, y) in data.iter() {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`save_csv`]. `num_classes` defaults to
/// `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let n = header.len().checked_sub(1).filter(|&n| n > 0).ok_or_else(|| Error::Parse {
        line: 1,
        msg: "header needs at least one feature column and a label column".into(),
    })?;
    for (i, h) in header.iter().take(n).enumerate() {
        if h != format!("x_{i}") {
            return Err(Error::Parse { line: 1, msg: format!("expected column x_{i}, found {h:?}") });
        }
    }
    if &header[n] != "label" {
        return Err(Error::Parse { line: 1, msg: format!("expected column label, found {:?}", &header[n]) });
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != n + 1 {
            return Err(bad(format!("expected {} fields, found {}", n + 1, rec.len())));
        }
        let x = rec
            .iter()
            .take(n)
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("feature outside [0, 1]".into()));
        }
        let y = rec[n].trim().parse::<usize>().map_err(|e| bad(format!("label {:?}: {e}", &rec[n])))?;
        inputs.push(x);
        labels.push(y);
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(inputs, labels, k)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}
