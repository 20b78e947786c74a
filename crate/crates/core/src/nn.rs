//! Dense feedforward networks with exact reverse-mode gradients and a
//! spectral-norm Lipschitz bound.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seed;
use crate::vecops::{dot, norm};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

const POWER_ITERATION_TOL: f64 = 1e-8;
const POWER_ITERATION_MAX_ITERS: usize = 10_000;
const POWER_ITERATION_SEED: u64 = 0x5E_ED0F_5EC7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer `act(W x + b)` with a row-major `out_dim x in_dim` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    out_dim: usize,
    in_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn from_flat(
        out_dim: usize,
        in_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidInput("layer dimensions must be positive".into()));
        }
        check_dim(out_dim * in_dim, weights.len())?;
        check_dim(out_dim, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite layer parameter".into()));
        }
        Ok(Self { out_dim, in_dim, weights, bias, activation })
    }

    /// Builds a layer from a list of weight rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != in_dim) {
            return Err(Error::InvalidInput("ragged weight matrix".into()));
        }
        Self::from_flat(out_dim, in_dim, rows.concat(), bias, activation)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim).map(|r| dot(self.row(r), x) + self.bias[r]).collect()
    }

    fn activate(&self, z: &[f64]) -> Vec<f64> {
        match self.activation {
            Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Activation::Identity => z.to_vec(),
        }
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(self.out_dim, self.in_dim, &self.weights)
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Parameter gradients of one layer, same shapes as the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub input: Vec<f64>,
    /// `<upstream, f(x)>`, the scalar whose gradient this bundle holds.
    pub loss: f64,
}

impl GradientBundle {
    /// Parameter gradients in [`DenseNet::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

/// A chain of dense layers `f: R^n -> R^d`. The last layer is always linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        };
        if last.activation != Activation::Identity {
            return Err(Error::InvalidInput("last layer must use the identity activation".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim != pair[0].out_dim {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized network with ReLU between the layers of `dims`
    /// (`[input, hidden.., output]`) and a linear last layer.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidInput("need at least input and output dims".into()));
        }
        let mut rng = seed::rng(seed);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let act = if l + 1 == n_layers { Activation::Identity } else { Activation::Relu };
                he_layer(dims[l], dims[l + 1], act, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let layer = Dense::from_flat(n, n, w, vec![0.0; n], Activation::Identity)
            .expect("identity layer is valid");
        Self { layers: vec![layer] }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Appends a layer on top of the current output. The feature layer keeps
    /// its activation, so stripping the head gives back the same features.
    pub fn with_head(&self, head: Dense) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers.push(head);
        Self::new(layers)
    }

    /// Removes the last layer; the new last layer becomes linear.
    pub fn without_head(&self) -> Result<(Self, Dense)> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidInput("cannot strip the only layer".into()));
        }
        let mut layers = self.layers.clone();
        let head = layers.pop().expect("len >= 2");
        if let Some(last) = layers.last_mut() {
            last.activation = Activation::Identity;
        }
        Ok((Self::new(layers)?, head))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.activate(&layer.pre_activation(&a));
        }
        Ok(a)
    }

    /// Gradients of `<upstream, f(x)>` with respect to parameters and input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradientBundle> {
        let mut flat = vec![0.0; self.num_params()];
        let (input, loss) = self.backward_accumulate(x, upstream, &mut flat)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let w = flat[off..off + l.weights.len()].to_vec();
            off += l.weights.len();
            let b = flat[off..off + l.bias.len()].to_vec();
            off += l.bias.len();
            layers.push(LayerGrad { weights: w, bias: b });
        }
        Ok(GradientBundle { layers, input, loss })
    }

    /// Adds the parameter gradient of `<upstream, f(x)>` into `acc` (in
    /// [`DenseNet::params`] order) and returns `(input gradient, <upstream, f(x)>)`.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        upstream: &[f64],
        acc: &mut [f64],
    ) -> Result<(Vec<f64>, f64)> {
        check_dim(self.output_dim(), upstream.len())?;
        let (loss, g) = self.backward_with(x, Some(acc), |f| Ok((dot(upstream, f), upstream.to_vec())))?;
        Ok((g, loss))
    }

    /// Runs the forward pass, lets `head` turn the output into a value and an
    /// output gradient, then backpropagates. Parameter gradients are added
    /// into `acc` when given. Returns the head's value and the input gradient.
    pub fn backward_with<T>(
        &self,
        x: &[f64],
        acc: Option<&mut [f64]>,
        head: impl FnOnce(&[f64]) -> Result<(T, Vec<f64>)>,
    ) -> Result<(T, Vec<f64>)> {
        check_dim(self.input_dim(), x.len())?;
        if let Some(acc) = acc.as_deref() {
            check_dim(self.num_params(), acc.len())?;
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for layer in &self.layers {
            let z = layer.pre_activation(&a);
            let next = layer.activate(&z);
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        let (value, upstream) = head(&a)?;
        check_dim(self.output_dim(), upstream.len())?;

        let mut acc = acc;
        let mut off = self.num_params();
        let mut g = upstream;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (gi, &zi) in g.iter_mut().zip(&pre[l]) {
                    if zi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            off -= layer.num_params();
            if let Some(acc) = acc.as_deref_mut() {
                let a_in = &inputs[l];
                let (w_acc, b_acc) = acc[off..off + layer.num_params()].split_at_mut(layer.weights.len());
                for r in 0..layer.out_dim {
                    let gr = g[r];
                    if gr != 0.0 {
                        let row = &mut w_acc[r * layer.in_dim..(r + 1) * layer.in_dim];
                        for (w, &ai) in row.iter_mut().zip(a_in) {
                            *w += gr * ai;
                        }
                    }
                    b_acc[r] += gr;
                }
            }
            let mut g_in = vec![0.0; layer.in_dim];
            for r in 0..layer.out_dim {
                let gr = g[r];
                if gr != 0.0 {
                    for (gi, &w) in g_in.iter_mut().zip(layer.row(r)) {
                        *gi += gr * w;
                    }
                }
            }
            g = g_in;
        }
        Ok((value, g))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// All parameters, layer by layer, weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter update".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Product of per-layer spectral norms. ReLU is 1-Lipschitz, so this
    /// bounds `||f(x) - f(y)|| / ||x - y||` from above.
    pub fn lipschitz_upper_bound(&self) -> f64 {
        self.layers.iter().map(Dense::spectral_norm).product()
    }
}

fn he_layer(in_dim: usize, out_dim: usize, act: Activation, rng: &mut impl Rng) -> Result<Dense> {
    let std = (2.0 / in_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let weights = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
    Dense::from_flat(out_dim, in_dim, weights, vec![0.0; out_dim], act)
}

pub fn lipschitz_upper_bound(net: &DenseNet) -> f64 {
    net.lipschitz_upper_bound()
}

/// Largest singular value of a row-major `rows x cols` matrix by power
/// iteration on `W^T W`, started from a fixed seeded vector.
///
/// The estimate is the Rayleigh quotient `sqrt(||W v||^2 / ||v||^2)`, which
/// is exact for isometries; iteration stops once the relative change drops
/// below 1e-8 or after 10^4 steps.
pub fn spectral_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    assert_eq!(rows * cols, data.len(), "matrix shape does not match data");
    if rows == 0 || cols == 0 || data.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = seed::rng(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let row = |r: usize| &data[r * cols..(r + 1) * cols];

    let mut estimate = 0.0;
    for _ in 0..POWER_ITERATION_MAX_ITERS {
        let wv: Vec<f64> = (0..rows).map(|r| dot(row(r), &v)).collect();
        let vv = dot(&v, &v);
        let next = (dot(&wv, &wv) / vv).sqrt();
        // v <- W^T W v, renormalized
        let mut wtwv = vec![0.0; cols];
        for (r, &s) in wv.iter().enumerate() {
            for (o, &w) in wtwv.iter_mut().zip(row(r)) {
                *o += s * w;
            }
        }
        let n = norm(&wtwv);
        let converged = (next - estimate).abs() <= POWER_ITERATION_TOL * next;
        estimate = next;
        if n == 0.0 || converged {
            break;
        }
        v = wtwv.into_iter().map(|x| x / n).collect();
    }
    estimate
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

/// On-disk JSON form of a [`DenseNet`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    format_version: u32,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerRecord>,
}

impl From<&DenseNet> for NetworkRecord {
    fn from(net: &DenseNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerRecord {
                weights: (0..l.out_dim).map(|r| l.row(r).to_vec()).collect(),
                bias: l.bias.clone(),
                activation: l.activation,
            })
            .collect();
        Self {
            format_version: NETWORK_FORMAT_VERSION,
            input_dim: net.input_dim(),
            output_dim: net.output_dim(),
            layers,
        }
    }
}

impl TryFrom<NetworkRecord> for DenseNet {
    type Error = Error;

    fn try_from(rec: NetworkRecord) -> Result<Self> {
        if rec.format_version != NETWORK_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported network format_version {}",
                rec.format_version
            )));
        }
        let layers = rec
            .layers
            .into_iter()
            .map(|l| Dense::from_rows(l.weights, l.bias, l.activation))
            .collect::<Result<Vec<_>>>()?;
        let net = DenseNet::new(layers)?;
        check_dim(rec.input_dim, net.input_dim())?;
        check_dim(rec.output_dim, net.output_dim())?;
        Ok(net)
    }
}

impl Serialize for DenseNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = NetworkRecord::deserialize(d)?;
        DenseNet::try_from(rec).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(rows: Vec<Vec<f64>>, bias: Vec<f64>, act: Activation) -> DenseNet {
        let layer = Dense::from_rows(rows, bias, act).unwrap();
        DenseNet { layers: vec![layer] }
    }

    #[test]
    fn forward_identity_and_relu() {
        let id = DenseNet::identity(2);
        assert_eq!(id.forward(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);

        let relu = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Relu);
        assert_eq!(relu.forward(&[1.0, -2.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn forward_hand_affine() {
        let net = DenseNet::new(vec![Dense::from_rows(
            vec![vec![2.0, 0.0], vec![0.0, 3.0]],
            vec![1.0, 1.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let net = DenseNet::identity(2);
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(net.backward(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let id = DenseNet::identity(2);
        assert_eq!(id.backward(&[0.3, 0.7], &[1.0, 0.0]).unwrap().input, vec![1.0, 0.0]);

        let relu = single(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0], Activation::Relu);
        assert_eq!(relu.backward(&[-1.0, 1.0], &[1.0, 1.0]).unwrap().input, vec![0.0, 1.0]);
        // subgradient at exactly zero is zero
        assert_eq!(relu.backward(&[0.0, 1.0], &[1.0, 1.0]).unwrap().input, vec![0.0, 1.0]);
    }

    #[test]
    fn new_rejects_bad_chains() {
        let a = Dense::from_rows(vec![vec![1.0, 0.0]], vec![0.0], Activation::Relu).unwrap();
        let b = Dense::from_rows(vec![vec![1.0, 0.0]], vec![0.0], Activation::Identity).unwrap();
        assert!(DenseNet::new(vec![a.clone(), b]).is_err());
        assert!(DenseNet::new(vec![a]).is_err());
        assert!(Dense::from_rows(vec![vec![f64::NAN]], vec![0.0], Activation::Identity).is_err());
    }

    #[test]
    fn spectral_norm_hand_cases() {
        assert_eq!(spectral_norm(2, 2, &[0.0; 4]), 0.0);
        assert!((spectral_norm(2, 2, &[3.0, 0.0, 0.0, -4.0]) - 4.0).abs() <= 4e-8);
        assert!((spectral_norm(2, 2, &[0.0, 1.0, 0.0, 0.0]) - 1.0).abs() <= 1e-8);
        // rank-one: [[1,2],[2,4]] has sigma = 5
        assert!((spectral_norm(2, 2, &[1.0, 2.0, 2.0, 4.0]) - 5.0).abs() <= 5e-8);
    }

    #[test]
    fn lipschitz_hand_cases() {
        assert_eq!(DenseNet::identity(3).lipschitz_upper_bound(), 1.0);
        let diag = single(vec![vec![3.0, 0.0], vec![0.0, -4.0]], vec![0.0, 0.0], Activation::Identity);
        assert!((diag.lipschitz_upper_bound() - 4.0).abs() <= 4e-8);

        let l1 = Dense::from_rows(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![0.0; 2], Activation::Relu).unwrap();
        let l2 = Dense::from_rows(vec![vec![3.0, 0.0], vec![0.0, 3.0]], vec![0.0; 2], Activation::Identity).unwrap();
        let net = DenseNet::new(vec![l1, l2]).unwrap();
        assert!((net.lipschitz_upper_bound() - 6.0).abs() <= 6e-8);
    }

    #[test]
    fn head_roundtrip() {
        let net = DenseNet::init(&[2, 5, 3], 1).unwrap();
        let head = Dense::from_rows(vec![vec![1.0, 0.0, 0.0]], vec![0.0], Activation::Identity).unwrap();
        let with = net.with_head(head.clone()).unwrap();
        assert_eq!(with.output_dim(), 1);
        assert_eq!(with.layers()[1].activation(), Activation::Identity);
        let (back, h) = with.without_head().unwrap();
        assert_eq!(back, net);
        assert_eq!(h, head);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let net = DenseNet::init(&[2, 7, 7, 4], 99).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: DenseNet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
        assert!(s.contains("\"format_version\":1"));
    }

    #[test]
    fn json_rejects_bad_version() {
        let net = DenseNet::identity(1);
        let s = serde_json::to_string(&net).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(serde_json::from_str::<DenseNet>(&s).is_err());
    }
}
