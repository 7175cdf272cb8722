//! Network architecture, priors, the spike-and-slab variational family and the
//! forward pass under a fixed draw of inclusion indicators and weights.
//!
//! Every layer `l` owns a `(p_l + 1) x p_{l+1}` block of weight slots. Row 0 is
//! the bias row, rows `1..=p_l` are the input connections; every slot,
//! including biases, carries its own inclusion indicator.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Floor applied to class probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputLink {
    SoftmaxCategorical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArch {
    widths: Vec<usize>,
    hidden: Activation,
    output: OutputLink,
}

impl NetworkArch {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "architecture needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        Ok(Self {
            widths,
            hidden: Activation::Relu,
            output: OutputLink::SoftmaxCategorical,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_link(&self) -> OutputLink {
        self.output
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// `(rows, cols)` of layer `l`'s slot matrix: `(p_l + 1, p_{l+1})`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l] + 1, self.widths[l + 1])
    }

    pub fn layer_slots(&self, l: usize) -> usize {
        let (r, c) = self.layer_shape(l);
        r * c
    }

    pub fn total_slots(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_slots(l)).sum()
    }

    /// Checks that `mats` has one matrix per layer with the layer's slot shape.
    pub fn check_layers<T>(&self, mats: &[Array2<T>], what: &str) -> Result<()> {
        if mats.len() != self.num_layers() {
            return Err(Error::Shape(format!(
                "{what}: expected {} layers, got {}",
                self.num_layers(),
                mats.len()
            )));
        }
        for (l, m) in mats.iter().enumerate() {
            if m.dim() != self.layer_shape(l) {
                return Err(Error::Shape(format!(
                    "{what}: layer {l} has shape {:?}, expected {:?}",
                    m.dim(),
                    self.layer_shape(l)
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for NetworkArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for NetworkArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidParameter(format!("bad layer width {t:?} in {s:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkArch::new(widths)
    }
}

/// Independent Bernoulli(psi) inclusion priors with N(0, sigma_beta_sq) slabs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    psi: f64,
    sigma_beta_sq: f64,
}

impl PriorConfig {
    pub fn new(psi: f64, sigma_beta_sq: f64) -> Result<Self> {
        if !(psi > 0.0 && psi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "psi must lie in (0, 1), got {psi}"
            )));
        }
        if !(sigma_beta_sq > 0.0 && sigma_beta_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_beta_sq must be positive, got {sigma_beta_sq}"
            )));
        }
        Ok(Self { psi, sigma_beta_sq })
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn sigma_beta_sq(&self) -> f64 {
        self.sigma_beta_sq
    }

    pub fn logit_psi(&self) -> f64 {
        (self.psi / (1.0 - self.psi)).ln()
    }
}

// ---------------------------------------------------------------------------
// Reparametrizations
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(x))` without underflow.
#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(softplus(x))`, accurate when `softplus(x)` underflows.
#[inline]
pub(crate) fn log_softplus(x: f64) -> f64 {
    if x < -36.0 {
        // softplus(x) == exp(x) to double precision here
        x
    } else {
        softplus(x).ln()
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_finite(x: f64, name: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be finite, got {x}")))
    }
}

/// Inclusion probability `alpha = 1 / (1 + exp(-omega))`.
pub fn reparam_alpha(omega: f64) -> Result<f64> {
    check_finite(omega, "omega")?;
    Ok(sigmoid(omega))
}

/// Slab standard deviation `sigma = log(1 + exp(rho))`.
pub fn reparam_sigma(rho: f64) -> Result<f64> {
    check_finite(rho, "rho")?;
    Ok(softplus(rho))
}

/// Relaxed indicator `sigmoid((omega - logit(nu)) / delta)`; note `logit(alpha) = omega`.
pub fn relax_indicator(omega: f64, nu: f64, delta: f64) -> f64 {
    sigmoid((omega - logit(nu)) / delta)
}

// ---------------------------------------------------------------------------
// Variational state
// ---------------------------------------------------------------------------

/// Per-layer variational parameters: slab means, pre-softplus scales and
/// pre-sigmoid inclusion logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub mu: Array2<f64>,
    pub rho: Array2<f64>,
    pub omega: Array2<f64>,
}

impl LayerParams {
    pub fn alpha(&self) -> Array2<f64> {
        self.omega.mapv(sigmoid)
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.rho.mapv(softplus)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mu.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    layers: Vec<LayerParams>,
}

impl VariationalState {
    pub fn new(arch: &NetworkArch, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                arch.num_layers(),
                layers.len()
            )));
        }
        for (l, p) in layers.iter().enumerate() {
            let want = arch.layer_shape(l);
            for (name, m) in [("mu", &p.mu), ("rho", &p.rho), ("omega", &p.omega)] {
                if m.dim() != want {
                    return Err(Error::Shape(format!(
                        "layer {l} {name} has shape {:?}, expected {want:?}",
                        m.dim()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "layer {l} {name} contains non-finite values"
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    /// Every slot set to the same `(mu, rho, omega)`.
    pub fn constant(arch: &NetworkArch, mu: f64, rho: f64, omega: f64) -> Result<Self> {
        let layers = (0..arch.num_layers())
            .map(|l| {
                let shape = arch.layer_shape(l);
                LayerParams {
                    mu: Array2::from_elem(shape, mu),
                    rho: Array2::from_elem(shape, rho),
                    omega: Array2::from_elem(shape, omega),
                }
            })
            .collect();
        Self::new(arch, layers)
    }

    /// Default initialization: `mu ~ N(0, 1/fan_in)`, `rho = -3`,
    /// `omega = logit(psi)`. Draws are layer-major, row-major.
    pub fn initialize(arch: &NetworkArch, prior: &PriorConfig, rng: &mut Stream) -> Self {
        let omega0 = prior.logit_psi();
        let layers = (0..arch.num_layers())
            .map(|l| {
                let shape = arch.layer_shape(l);
                let scale = (1.0 / arch.widths()[l] as f64).sqrt();
                let mu = Array2::from_shape_simple_fn(shape, || scale * rng.normal());
                LayerParams {
                    mu,
                    rho: Array2::from_elem(shape, -3.0),
                    omega: Array2::from_elem(shape, omega0),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn alpha(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(LayerParams::alpha).collect()
    }

    pub fn sigma(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(LayerParams::sigma).collect()
    }

    pub fn total_slots(&self) -> usize {
        self.layers.iter().map(|p| p.mu.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(LayerParams::dim).collect()
    }

    pub(crate) fn check_arch(&self, arch: &NetworkArch) -> Result<()> {
        let mus: Vec<_> = self.layers.iter().map(|p| p.mu.view()).collect();
        if mus.len() != arch.num_layers()
            || mus
                .iter()
                .enumerate()
                .any(|(l, m)| m.dim() != arch.layer_shape(l))
        {
            return Err(Error::Shape(format!(
                "state shapes {:?} do not match architecture {arch}",
                self.shapes()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One hard draw `(gamma, beta)`; `eps` retains the standard normals behind `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub gamma: Array2<bool>,
    pub beta: Array2<f64>,
    pub eps: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub layers: Vec<MaskedLayer>,
}

impl MaskedSample {
    /// Effective weights `gamma * beta`; `beta` is already zero on the spike.
    pub fn weights(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.beta.clone()).collect()
    }

    pub fn active_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.gamma.iter().filter(|&&g| g).count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedLayer {
    pub gamma_tilde: Array2<f64>,
    pub beta: Array2<f64>,
    pub nu: Array2<f64>,
    pub eps: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSample {
    pub delta: f64,
    pub layers: Vec<RelaxedLayer>,
}

impl RelaxedSample {
    pub fn weights(&self) -> Vec<Array2<f64>> {
        self.layers
            .iter()
            .map(|l| &l.gamma_tilde * &l.beta)
            .collect()
    }
}

/// Draws `gamma ~ Bernoulli(alpha)` by inverse CDF (`gamma = u < alpha`) and
/// `beta = (mu + sigma z) gamma`. Per slot the uniform is drawn before the
/// normal, and both are drawn even on the spike so the stream position does
/// not depend on the outcome.
pub fn sample_masked(state: &VariationalState, rng: &mut Stream) -> MaskedSample {
    let layers = state
        .layers
        .iter()
        .map(|p| {
            let (rows, cols) = p.dim();
            let mut gamma = Array2::from_elem((rows, cols), false);
            let mut beta = Array2::zeros((rows, cols));
            let mut eps = Array2::zeros((rows, cols));
            for k in 0..rows {
                for j in 0..cols {
                    let u = rng.uniform();
                    let z = rng.normal();
                    let g = u < sigmoid(p.omega[[k, j]]);
                    gamma[[k, j]] = g;
                    eps[[k, j]] = z;
                    if g {
                        beta[[k, j]] = p.mu[[k, j]] + softplus(p.rho[[k, j]]) * z;
                    }
                }
            }
            MaskedLayer { gamma, beta, eps }
        })
        .collect();
    MaskedSample { layers }
}

/// Concrete-style relaxation: `nu ~ U(0,1)`, `eps ~ N(0,1)` per slot (in that
/// order), `gamma_tilde = sigmoid((logit(alpha) - logit(nu)) / delta)` and
/// `beta = mu + sigma eps`. In floating point `gamma_tilde` saturates to the
/// closed interval `[0, 1]` for small `delta`.
pub fn sample_relaxed(
    state: &VariationalState,
    delta: f64,
    rng: &mut Stream,
) -> Result<RelaxedSample> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "relaxation temperature must be positive, got {delta}"
        )));
    }
    let layers = state
        .layers
        .iter()
        .map(|p| {
            let (rows, cols) = p.dim();
            let mut nu = Array2::zeros((rows, cols));
            let mut eps = Array2::zeros((rows, cols));
            for k in 0..rows {
                for j in 0..cols {
                    nu[[k, j]] = rng.uniform_open();
                    eps[[k, j]] = rng.normal();
                }
            }
            let mut gamma_tilde = Array2::zeros((rows, cols));
            Zip::from(&mut gamma_tilde)
                .and(&p.omega)
                .and(&nu)
                .for_each(|g, &w, &v| *g = relax_indicator(w, v, delta));
            let mut beta = Array2::zeros((rows, cols));
            Zip::from(&mut beta)
                .and(&p.mu)
                .and(&p.rho)
                .and(&eps)
                .for_each(|b, &m, &r, &e| *b = m + softplus(r) * e);
            RelaxedLayer {
                gamma_tilde,
                beta,
                nu,
                eps,
            }
        })
        .collect();
    Ok(RelaxedSample { delta, layers })
}

/// Per-layer boolean matrices selecting weight slots.
pub type SlotMask = Vec<Array2<bool>>;

/// Slab draw on a fixed structure: one normal per slot (drawn for every slot),
/// `beta = mu + sigma z` where `mask` is set and `0` elsewhere.
pub fn sample_with_mask(state: &VariationalState, mask: &[Array2<bool>], rng: &mut Stream) -> MaskedSample {
    let layers = state
        .layers
        .iter()
        .zip(mask)
        .map(|(p, m)| {
            let eps = Array2::from_shape_simple_fn(p.dim(), || rng.normal());
            let mut beta = Array2::zeros(p.dim());
            Zip::from(&mut beta)
                .and(m)
                .and(&p.mu)
                .and(&p.rho)
                .and(&eps)
                .for_each(|b, &g, &mu, &rho, &z| {
                    if g {
                        *b = mu + softplus(rho) * z;
                    }
                });
            MaskedLayer {
                gamma: m.clone(),
                beta,
                eps,
            }
        })
        .collect();
    MaskedSample { layers }
}

// ---------------------------------------------------------------------------
// Forward pass and likelihood
// ---------------------------------------------------------------------------

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Class probabilities for a single input under fixed effective weights.
pub fn forward(arch: &NetworkArch, weights: &[Array2<f64>], x: &[f64]) -> Result<Vec<f64>> {
    arch.check_layers(weights, "weights")?;
    if x.len() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "input has length {}, architecture expects {}",
            x.len(),
            arch.input_dim()
        )));
    }
    let mut h = x.to_vec();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let (rows, cols) = w.dim();
        let mut next = w.row(0).to_vec();
        for k in 1..rows {
            let hk = h[k - 1];
            if hk != 0.0 {
                for (j, out) in next.iter_mut().enumerate().take(cols) {
                    *out += hk * w[[k, j]];
                }
            }
        }
        if l < last {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            softmax_in_place(&mut next);
        }
        h = next;
    }
    Ok(h)
}

/// Class probabilities for a batch of inputs (one row per example).
pub fn forward_batch(
    arch: &NetworkArch,
    weights: &[Array2<f64>],
    inputs: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    arch.check_layers(weights, "weights")?;
    if inputs.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, architecture expects {}",
            inputs.ncols(),
            arch.input_dim()
        )));
    }
    let mut h = inputs.to_owned();
    let last = weights.len() - 1;
    for (l, w) in weights.iter().enumerate() {
        let mut a = h.dot(&w.slice(s![1.., ..]));
        a += &w.row(0);
        if l < last {
            a.mapv_inplace(|v| v.max(0.0));
        } else {
            for mut row in a.rows_mut() {
                softmax_in_place(row.as_slice_mut().unwrap());
            }
        }
        h = a;
    }
    Ok(h)
}

/// `log probs[label]`, floored at `log(1e-300)`.
pub fn log_likelihood(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(p.max(PROB_FLOOR).ln())
}

/// Summed log-likelihood of a labelled batch and its gradient with respect to
/// every effective weight (ascent direction). Examples whose true-class
/// probability sits on the floor contribute a constant and no gradient.
pub(crate) fn loglik_and_grad(
    weights: &[Array2<f64>],
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> (f64, Vec<Array2<f64>>) {
    let n_layers = weights.len();
    // activations[l] is the input to layer l
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    let mut h = inputs.to_owned();
    for (l, w) in weights.iter().enumerate() {
        let mut a = h.dot(&w.slice(s![1.., ..]));
        a += &w.row(0);
        if l + 1 < n_layers {
            a.mapv_inplace(|v| v.max(0.0));
        } else {
            for mut row in a.rows_mut() {
                softmax_in_place(row.as_slice_mut().unwrap());
            }
        }
        activations.push(h);
        h = a;
    }
    let probs = h;

    let mut total = 0.0;
    let mut delta = -probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        if p > PROB_FLOOR {
            total += p.ln();
            delta[[i, y]] += 1.0;
        } else {
            total += PROB_FLOOR.ln();
            delta.row_mut(i).fill(0.0);
        }
    }

    let mut grads: Vec<Array2<f64>> = weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    for l in (0..n_layers).rev() {
        let input = &activations[l];
        let g = &mut grads[l];
        g.row_mut(0).assign(&delta.sum_axis(Axis(0)));
        g.slice_mut(s![1.., ..]).assign(&input.t().dot(&delta));
        if l > 0 {
            let mut back = delta.dot(&weights[l].slice(s![1.., ..]).t());
            Zip::from(&mut back)
                .and(input)
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = back;
        }
    }
    (total, grads)
}
