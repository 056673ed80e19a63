//! Continuous piecewise-affine generative networks.
//!
//! A network is a stack of affine layers `h ↦ W h + v` with a slope-coded
//! activation (`relu`, `leaky_relu(η)`, `abs`, or `identity`) after every
//! layer except the last. Each such activation `σ` satisfies
//! `σ(t) = slope(sign t) · t`, so once the sign pattern of every hidden
//! pre-activation is fixed the whole network is a single affine map. The sign
//! pattern is the [`ActivationCode`]; the set of latent points realizing a
//! code is a convex polytope (see [`crate::geometry`]); and the network
//! restricted to that polytope is [`GenerativeNetwork::per_region_affine`].
//!
//! Sign conventions: `sign(0) = +1` everywhere, so codes are total and the
//! boundary between two regions belongs to the `+1` side.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied coordinate-wise after a hidden layer.
///
/// Every variant is positively homogeneous per branch: `σ(t) = slope(q)·t`
/// where `q = sign(t)` (with `sign(0) = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `max(t, 0)`: slope 1 on `t ≥ 0`, slope 0 on `t < 0`.
    Relu,
    /// `t` for `t ≥ 0`, `η·t` for `t < 0` (with `η > 0`).
    LeakyRelu {
        /// Negative-branch slope.
        eta: f64,
    },
    /// `|t|`: slope 1 on `t ≥ 0`, slope −1 on `t < 0`.
    Abs,
    /// `t` (no branching; contributes no partition hyperplanes).
    Identity,
}

impl Activation {
    /// Apply the activation to a scalar.
    pub fn apply(self, t: f64) -> f64 {
        self.slope(if t >= 0.0 { 1 } else { -1 }) * t
    }

    /// Branch slope selected by a sign (`+1` ⇒ `t ≥ 0` branch).
    pub fn slope(self, sign: i8) -> f64 {
        match self {
            Activation::Relu => {
                if sign > 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { eta } => {
                if sign > 0 {
                    1.0
                } else {
                    eta
                }
            }
            Activation::Abs => {
                if sign > 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    /// Whether the activation branches on the sign of its input. `identity`
    /// does not, so it contributes no hyperplanes to the latent partition.
    pub fn branches(self) -> bool {
        !matches!(self, Activation::Identity)
    }
}

/// One affine layer `h ↦ W h + v` plus its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Weight matrix `W`, shape `out_dim × in_dim`.
    pub weight: DMatrix<f64>,
    /// Bias vector `v`, length `out_dim`.
    pub bias: DVector<f64>,
    /// Activation applied after this layer (`Identity` for the last layer).
    pub activation: Activation,
}

impl Layer {
    /// Output dimension of the layer.
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Input dimension of the layer.
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Activation-sign pattern of every hidden layer: `signs[l][k] ∈ {−1, +1}`
/// is the sign of hidden layer `l`'s unit `k` pre-activation.
///
/// Codes for `identity` hidden layers are canonicalized to all `+1` (their
/// slope is sign-independent), keeping the code ↔ region correspondence a
/// bijection. Ordering is lexicographic over the flattened sign vector
/// (`−1 < +1`), used as the deterministic tie-break wherever one is needed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationCode {
    /// Per hidden layer, per unit sign (`+1` or `−1`).
    pub signs: Vec<Vec<i8>>,
}

impl ActivationCode {
    /// Code with every sign `+1` for the given hidden widths.
    pub fn all_positive(hidden_widths: &[usize]) -> Self {
        ActivationCode {
            signs: hidden_widths.iter().map(|&w| vec![1i8; w]).collect(),
        }
    }

    /// The code with sign `(layer, unit)` flipped.
    pub fn flipped(&self, layer: usize, unit: usize) -> Self {
        let mut signs = self.signs.clone();
        signs[layer][unit] = -signs[layer][unit];
        ActivationCode { signs }
    }

    /// Total number of sign entries.
    pub fn len(&self) -> usize {
        self.signs.iter().map(Vec::len).sum()
    }

    /// Whether the code has no sign entries (e.g. a one-layer network).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ActivationCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (l, layer) in self.signs.iter().enumerate() {
            if l > 0 {
                write!(f, "|")?;
            }
            for &s in layer {
                write!(f, "{}", if s > 0 { '+' } else { '-' })?;
            }
        }
        Ok(())
    }
}

/// A dense affine map `z ↦ A z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    /// Linear part, shape `out × in`.
    pub a: DMatrix<f64>,
    /// Offset, length `out`.
    pub b: DVector<f64>,
}

impl AffineMap {
    /// Evaluate the map at `z`.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.b
    }
}

/// Reusable buffers for allocation-free forward passes in sampling loops.
#[derive(Debug, Clone)]
pub struct ForwardScratch {
    bufs: Vec<DVector<f64>>,
}

/// A generative network `g : ℝ^S → ℝ^D` of affine layers with slope-coded
/// activations on all layers but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeNetwork {
    latent_dim: usize,
    layers: Vec<Layer>,
}

impl GenerativeNetwork {
    /// Build a network, validating all structural invariants: a non-empty
    /// layer stack with a consistent dimension chain, `identity` activation
    /// on the last layer, finite parameters, and no identically-zero weight
    /// row on a branching hidden layer (such a unit has no activation
    /// hyperplane, which breaks the code ↔ region bijection).
    pub fn new(latent_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidNetwork("latent_dim must be ≥ 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network needs at least one layer".into()));
        }
        let depth = layers.len();
        let mut in_dim = latent_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim() != in_dim {
                return Err(Error::InvalidNetwork(format!(
                    "layer {l}: expected input dim {in_dim}, weight has {}",
                    layer.in_dim()
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::InvalidNetwork(format!(
                    "layer {l}: bias length {} ≠ output dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.out_dim() == 0 {
                return Err(Error::InvalidNetwork(format!("layer {l}: zero output dim")));
            }
            if !layer.weight.iter().all(|w| w.is_finite())
                || !layer.bias.iter().all(|b| b.is_finite())
            {
                return Err(Error::InvalidNetwork(format!(
                    "layer {l}: non-finite parameter"
                )));
            }
            if let Activation::LeakyRelu { eta } = layer.activation {
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(Error::InvalidNetwork(format!(
                        "layer {l}: leaky_relu slope must be positive and finite, got {eta}"
                    )));
                }
            }
            let hidden = l + 1 < depth;
            if hidden && layer.activation.branches() {
                for k in 0..layer.out_dim() {
                    if layer.weight.row(k).iter().all(|&w| w == 0.0) {
                        return Err(Error::DegenerateWeights { layer: l, unit: k });
                    }
                }
            }
            if !hidden && layer.activation != Activation::Identity {
                return Err(Error::InvalidNetwork(
                    "last layer must have identity activation".into(),
                ));
            }
            in_dim = layer.out_dim();
        }
        Ok(GenerativeNetwork { latent_dim, layers })
    }

    /// Latent dimension `S`.
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Observation dimension `D` (output dim of the last layer).
    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated non-empty").out_dim()
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// The layer stack.
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Widths of the hidden layers (layers `0..L−1`).
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.depth() - 1]
            .iter()
            .map(Layer::out_dim)
            .collect()
    }

    /// Fresh scratch buffers sized for this network.
    pub fn scratch(&self) -> ForwardScratch {
        ForwardScratch {
            bufs: self.layers.iter().map(|l| DVector::zeros(l.out_dim())).collect(),
        }
    }

    /// Evaluate `g(z)`.
    pub fn forward(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut scratch = self.scratch();
        self.forward_into(z, &mut scratch);
        scratch.bufs.last().expect("non-empty").clone()
    }

    /// Evaluate `g(z)` into preallocated buffers; returns the output buffer.
    /// The hot path for Monte-Carlo oracles.
    pub fn forward_into<'s>(&self, z: &DVector<f64>, scratch: &'s mut ForwardScratch) -> &'s DVector<f64> {
        let depth = self.depth();
        for (l, layer) in self.layers.iter().enumerate() {
            // Split the scratch so the previous buffer can be borrowed while
            // writing the current one.
            let (prev, cur) = scratch.bufs.split_at_mut(l);
            let input: &DVector<f64> = if l == 0 { z } else { &prev[l - 1] };
            let out = &mut cur[0];
            out.copy_from(&layer.bias);
            out.gemv(1.0, &layer.weight, input, 1.0);
            if l + 1 < depth {
                for t in out.iter_mut() {
                    *t = layer.activation.apply(*t);
                }
            }
        }
        scratch.bufs.last().expect("non-empty")
    }

    /// The activation code of `z`: the sign pattern of every hidden
    /// pre-activation, with `sign(0) = +1`. Codes of `identity` hidden layers
    /// are canonicalized to `+1`.
    pub fn activation_code(&self, z: &DVector<f64>) -> ActivationCode {
        let depth = self.depth();
        let mut signs = Vec::with_capacity(depth - 1);
        let mut h = z.clone();
        for layer in self.layers.iter().take(depth - 1) {
            let pre = &layer.weight * &h + &layer.bias;
            let q: Vec<i8> = if layer.activation.branches() {
                pre.iter().map(|&t| if t >= 0.0 { 1 } else { -1 }).collect()
            } else {
                vec![1; pre.len()]
            };
            h = DVector::from_fn(pre.len(), |k, _| layer.activation.slope(q[k]) * pre[k]);
            signs.push(q);
        }
        ActivationCode { signs }
    }

    /// Slope diagonal `D^l` of hidden layer `l` under `code` (length =
    /// hidden width of layer `l`).
    pub fn slope_diagonal(&self, code: &ActivationCode, l: usize) -> DVector<f64> {
        let layer = &self.layers[l];
        DVector::from_fn(layer.out_dim(), |k, _| {
            layer.activation.slope(code.signs[l][k])
        })
    }

    /// The affine map `z ↦ pre-activation of layer `l`` on the region of
    /// `code`: layers `0..l` with their coded slopes applied, then layer `l`
    /// without its activation. `l` ranges over `0..L`.
    pub fn partial_affine(&self, code: &ActivationCode, l: usize) -> AffineMap {
        assert!(l < self.depth(), "layer index {l} out of range");
        let mut a = self.layers[0].weight.clone();
        let mut b = self.layers[0].bias.clone();
        for i in 1..=l {
            let d = self.slope_diagonal(code, i - 1);
            // a ← W_i · D_{i-1} · a ;  b ← W_i · D_{i-1} · b + v_i
            let da = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| d[r] * a[(r, c)]);
            let db = DVector::from_fn(b.len(), |r, _| d[r] * b[r]);
            a = &self.layers[i].weight * da;
            b = &self.layers[i].weight * db + &self.layers[i].bias;
        }
        AffineMap { a, b }
    }

    /// The affine map the network computes on the region of `code`
    /// (`A_ω`, `b_ω`): the partial map of the last layer.
    pub fn per_region_affine(&self, code: &ActivationCode) -> AffineMap {
        self.partial_affine(code, self.depth() - 1)
    }

    /// The linear map from layer `l`'s *post*-activation to the network
    /// output under `code`: `W_{L−1} D_{L−2} ⋯ D_{l+1} W_{l+1}` (shape
    /// `D × width_l`). Identity for `l = L−1`.
    pub fn backprop_affine(&self, code: &ActivationCode, l: usize) -> DMatrix<f64> {
        let depth = self.depth();
        assert!(l < depth, "layer index {l} out of range");
        let mut m = DMatrix::identity(self.output_dim(), self.output_dim());
        // Multiply from the output side inwards: m ← m · W_i · D_{i-1}.
        for i in (l + 1..depth).rev() {
            let mw = &m * &self.layers[i].weight;
            if i > l + 1 {
                let d = self.slope_diagonal(code, i - 1);
                m = DMatrix::from_fn(mw.nrows(), mw.ncols(), |r, c| mw[(r, c)] * d[c]);
            } else {
                m = mw;
            }
        }
        m
    }

    /// `A^{i+1→L} D^i v^i` — the contribution of layer `i`'s bias to `b_ω`
    /// (for the last layer this is just `v_{L−1}`). `b_ω` is the sum of
    /// these over all layers.
    pub fn bias_contribution(&self, code: &ActivationCode, i: usize) -> DVector<f64> {
        let depth = self.depth();
        if i == depth - 1 {
            return self.layers[i].bias.clone();
        }
        let back = self.backprop_affine(code, i);
        let d = self.slope_diagonal(code, i);
        let dv = DVector::from_fn(d.len(), |k, _| d[k] * self.layers[i].bias[k]);
        back * dv
    }

    /// A copy of the network with layer `l`'s bias replaced (revalidated).
    pub fn with_bias(&self, l: usize, bias: DVector<f64>) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[l].bias = bias;
        GenerativeNetwork::new(self.latent_dim, layers)
    }

    /// A copy of the network with layer `l`'s weight replaced (revalidated).
    pub fn with_weight(&self, l: usize, weight: DMatrix<f64>) -> Result<Self> {
        let mut layers = self.layers.clone();
        layers[l].weight = weight;
        GenerativeNetwork::new(self.latent_dim, layers)
    }
}

/// A randomly initialized network with layer widths `dims` (`dims[0]` is the
/// latent dimension, `dims.last()` the output dimension): weights drawn
/// from `N(0, 1/fan_in)`, biases from `N(0, 0.1²)`, hidden layers using
/// `activation` and the output layer the identity. Deterministic in `seed`.
pub fn random_network(
    dims: &[usize],
    activation: Activation,
    seed: u64,
) -> Result<GenerativeNetwork> {
    if dims.len() < 2 {
        return Err(Error::InvalidNetwork(
            "a network needs at least an input and an output width".into(),
        ));
    }
    let mut r = crate::rng::seeded(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 1..dims.len() {
        let fan_in = dims[i - 1];
        let weight =
            crate::rng::normal_matrix(&mut r, dims[i], fan_in, (1.0 / fan_in as f64).sqrt());
        let bias = crate::rng::standard_normal_vector(&mut r, dims[i]) * 0.1;
        let act = if i + 1 < dims.len() { activation } else { Activation::Identity };
        layers.push(Layer { weight, bias, activation: act });
    }
    GenerativeNetwork::new(dims[0], layers)
}

/// Gaussian noise model: observation covariance `Σ_x` and latent prior
/// covariance `Σ_z`, with cached Cholesky factors, inverses and
/// log-determinants.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma_x: DMatrix<f64>,
    sigma_z: DMatrix<f64>,
    sigma_x_inv: DMatrix<f64>,
    sigma_z_inv: DMatrix<f64>,
    logdet_sigma_x: f64,
    logdet_sigma_z: f64,
    chol_x: Cholesky<f64, Dyn>,
    chol_z: Cholesky<f64, Dyn>,
}

/// Cholesky-factor a symmetric positive-definite matrix, with a typed error
/// identifying the offending matrix on failure.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSpd(format!("{what}: not square ({}×{})", m.nrows(), m.ncols())));
    }
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotSpd(format!("{what}: asymmetry {asym:.3e}")));
    }
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotSpd(format!("{what}: Cholesky factorization failed")))
}

impl NoiseModel {
    /// Build from full covariance matrices (validated SPD).
    pub fn new(sigma_x: DMatrix<f64>, sigma_z: DMatrix<f64>) -> Result<Self> {
        let chol_x = spd_cholesky(&sigma_x, "sigma_x")?;
        let chol_z = spd_cholesky(&sigma_z, "sigma_z")?;
        let logdet_sigma_x = 2.0 * chol_x.l().diagonal().map(f64::ln).sum();
        let logdet_sigma_z = 2.0 * chol_z.l().diagonal().map(f64::ln).sum();
        Ok(NoiseModel {
            sigma_x_inv: chol_x.inverse(),
            sigma_z_inv: chol_z.inverse(),
            logdet_sigma_x,
            logdet_sigma_z,
            chol_x,
            chol_z,
            sigma_x,
            sigma_z,
        })
    }

    /// Isotropic observation noise `σ_x² I_D` and prior `σ_z² I_S`.
    pub fn isotropic(d: usize, var_x: f64, s: usize, var_z: f64) -> Result<Self> {
        if !(var_x > 0.0) || !(var_z > 0.0) {
            return Err(Error::NotSpd(format!(
                "isotropic variances must be positive (got var_x={var_x}, var_z={var_z})"
            )));
        }
        NoiseModel::new(
            DMatrix::identity(d, d) * var_x,
            DMatrix::identity(s, s) * var_z,
        )
    }

    /// Observation covariance `Σ_x`.
    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    /// Latent prior covariance `Σ_z`.
    pub fn sigma_z(&self) -> &DMatrix<f64> {
        &self.sigma_z
    }

    /// `Σ_x⁻¹`.
    pub fn sigma_x_inv(&self) -> &DMatrix<f64> {
        &self.sigma_x_inv
    }

    /// `Σ_z⁻¹`.
    pub fn sigma_z_inv(&self) -> &DMatrix<f64> {
        &self.sigma_z_inv
    }

    /// `log det Σ_x`.
    pub fn logdet_sigma_x(&self) -> f64 {
        self.logdet_sigma_x
    }

    /// `log det Σ_z`.
    pub fn logdet_sigma_z(&self) -> f64 {
        self.logdet_sigma_z
    }

    /// Lower Cholesky factor of `Σ_x` (for sampling observation noise).
    pub fn chol_x_l(&self) -> DMatrix<f64> {
        self.chol_x.l()
    }

    /// Lower Cholesky factor of `Σ_z` (for sampling the prior).
    pub fn chol_z_l(&self) -> DMatrix<f64> {
        self.chol_z.l()
    }

    /// Replace `Σ_x`, revalidating and recaching.
    pub fn with_sigma_x(&self, sigma_x: DMatrix<f64>) -> Result<Self> {
        NoiseModel::new(sigma_x, self.sigma_z.clone())
    }

    /// Replace `Σ_z`, revalidating and recaching.
    pub fn with_sigma_z(&self, sigma_z: DMatrix<f64>) -> Result<Self> {
        NoiseModel::new(self.sigma_x.clone(), sigma_z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// A small random network for tests: dims like [S, w1, ..., D].
    pub(crate) fn random_net(dims: &[usize], activation: Activation, seed: u64) -> GenerativeNetwork {
        random_network(dims, activation, seed).expect("valid test net")
    }

    #[test]
    fn forward_matches_region_affine_map() {
        for (seed, act) in [
            (1, Activation::Relu),
            (2, Activation::LeakyRelu { eta: 0.2 }),
            (3, Activation::Abs),
        ] {
            let net = random_net(&[2, 5, 4, 3], act, seed);
            let mut r = rng::seeded(100 + seed);
            for _ in 0..100 {
                let z = rng::standard_normal_vector(&mut r, 2) * 2.0;
                let code = net.activation_code(&z);
                let map = net.per_region_affine(&code);
                let err = (net.forward(&z) - map.apply(&z)).abs().max();
                assert!(err < 1e-12, "affine mismatch {err}");
            }
        }
    }

    #[test]
    fn partial_affine_telescopes() {
        let net = random_net(&[3, 6, 5, 2], Activation::LeakyRelu { eta: 0.3 }, 9);
        let mut r = rng::seeded(10);
        let z = rng::standard_normal_vector(&mut r, 3);
        let code = net.activation_code(&z);
        // h^{l+1}(z) = W_{l+1} · D_l · h^l(z) + v_{l+1}
        for l in 0..net.depth() - 1 {
            let h_l = net.partial_affine(&code, l).apply(&z);
            let d = net.slope_diagonal(&code, l);
            let s = DVector::from_fn(h_l.len(), |k, _| d[k] * h_l[k]);
            let expect = &net.layers()[l + 1].weight * s + &net.layers()[l + 1].bias;
            let got = net.partial_affine(&code, l + 1).apply(&z);
            assert!((expect - got).abs().max() < 1e-12);
        }
    }

    #[test]
    fn backprop_factorizes_region_map() {
        let net = random_net(&[2, 4, 4, 3], Activation::Relu, 21);
        let mut r = rng::seeded(22);
        let z = rng::standard_normal_vector(&mut r, 2);
        let code = net.activation_code(&z);
        let full = net.per_region_affine(&code);
        for l in 0..net.depth() - 1 {
            // A_ω = A^{l+1→L} · D^l · A^{1→l}
            let back = net.backprop_affine(&code, l);
            let d = net.slope_diagonal(&code, l);
            let part = net.partial_affine(&code, l);
            let da = DMatrix::from_fn(part.a.nrows(), part.a.ncols(), |i, j| d[i] * part.a[(i, j)]);
            let prod = &back * da;
            assert!((&full.a - prod).abs().max() < 1e-12);
        }
        // b_ω = Σ_i bias_contribution(i)
        let mut b = DVector::zeros(net.output_dim());
        for i in 0..net.depth() {
            b += net.bias_contribution(&code, i);
        }
        assert!((b - full.b).abs().max() < 1e-12);
    }

    #[test]
    fn sign_of_zero_is_positive() {
        // One unit with weight 1, bias 0: pre-activation at z = 0 is exactly 0.
        let net = GenerativeNetwork::new(
            1,
            vec![
                Layer {
                    weight: DMatrix::from_row_slice(1, 1, &[1.0]),
                    bias: DVector::from_element(1, 0.0),
                    activation: Activation::Relu,
                },
                Layer {
                    weight: DMatrix::from_row_slice(1, 1, &[1.0]),
                    bias: DVector::from_element(1, 0.0),
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap();
        let code = net.activation_code(&DVector::from_element(1, 0.0));
        assert_eq!(code.signs, vec![vec![1]]);
    }

    #[test]
    fn degenerate_hidden_row_is_rejected() {
        let res = GenerativeNetwork::new(
            1,
            vec![
                Layer {
                    weight: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
                    bias: DVector::from_column_slice(&[0.1, 0.2]),
                    activation: Activation::Relu,
                },
                Layer {
                    weight: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                    bias: DVector::from_element(1, 0.0),
                    activation: Activation::Identity,
                },
            ],
        );
        assert!(matches!(res, Err(Error::DegenerateWeights { layer: 0, unit: 1 })));
    }

    #[test]
    fn linear_network_has_trivial_code() {
        let net = random_net(&[2, 3], Activation::Relu, 5);
        let z = DVector::from_column_slice(&[0.3, -0.7]);
        let code = net.activation_code(&z);
        assert!(code.is_empty());
        let map = net.per_region_affine(&code);
        assert_eq!(map.a, net.layers()[0].weight);
        assert_eq!(map.b, net.layers()[0].bias);
    }

    #[test]
    fn noise_model_caches_are_consistent() {
        let sx = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let sz = DMatrix::from_row_slice(1, 1, &[2.0]);
        let nm = NoiseModel::new(sx.clone(), sz).unwrap();
        let eye = nm.sigma_x() * nm.sigma_x_inv();
        assert!((eye - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-10);
        let det: f64 = 0.5 * 0.4 - 0.1 * 0.1;
        assert!((nm.logdet_sigma_x() - det.ln()).abs() < 1e-10);
        assert!((nm.logdet_sigma_z() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            NoiseModel::new(bad, DMatrix::identity(1, 1)),
            Err(Error::NotSpd(_))
        ));
    }
}
