//! Brute-force ground truth on tiny instances: every inclusion mask is
//! enumerated and the slab weights of the active slots are integrated with
//! tensor-product Gauss–Hermite quadrature.

pub mod checks;
mod fd;
mod relaxed;

use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use ndarray::Array2;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{log_sigmoid, NetworkArch, PriorConfig, SlotMask, VariationalState, PROB_FLOOR};
use crate::vi::{kl_analytic, KlMode};

pub use fd::{finite_diff_checked, finite_diff_grad, finite_diff_vec, CheckedGradient};
pub use relaxed::{exact_relaxed_elbo, relaxed_elbo_on, QmcDesign};

pub const MAX_SLOTS: usize = 12;
pub const MAX_QUAD_DIMS: usize = 6;
pub const MAX_POINTS: usize = 32;
pub const MIN_ORDER: usize = 5;
pub const DEFAULT_ORDER: usize = 20;

/// A network small enough for exhaustive enumeration of its masks.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub arch: NetworkArch,
    pub data: LabeledDataset,
    pub prior: PriorConfig,
    /// Gauss–Hermite nodes per active slot.
    pub order: usize,
}

impl TinyInstance {
    pub fn new(arch: NetworkArch, data: LabeledDataset, prior: PriorConfig, order: usize) -> Result<Self> {
        if arch.total_slots() > MAX_SLOTS {
            return Err(Error::Capacity(format!(
                "{} weight slots, the oracle handles at most {MAX_SLOTS}",
                arch.total_slots()
            )));
        }
        if data.len() > MAX_POINTS {
            return Err(Error::Capacity(format!(
                "{} data points, the oracle handles at most {MAX_POINTS}",
                data.len()
            )));
        }
        if order < MIN_ORDER {
            return Err(Error::InvalidParameter(format!(
                "quadrature order must be at least {MIN_ORDER}, got {order}"
            )));
        }
        if data.dim() != arch.input_dim() || data.class_count() > arch.class_count() {
            return Err(Error::Shape(format!("dataset does not fit architecture {arch}")));
        }
        Ok(Self {
            arch,
            data,
            prior,
            order,
        })
    }

    pub fn with_order(&self, order: usize) -> Result<Self> {
        Self::new(self.arch.clone(), self.data.clone(), self.prior, order)
    }

    pub fn slots(&self) -> usize {
        self.arch.total_slots()
    }

    fn net(&self) -> FlatNet {
        FlatNet::new(&self.arch, &self.data)
    }

    /// Normalized Gauss–Hermite rule for a standard normal: nodes `sqrt(2) t`
    /// and weights `w / sqrt(pi)`.
    fn rule(&self) -> Vec<(f64, f64)> {
        normal_rule(self.order)
    }
}

pub(crate) fn normal_rule(order: usize) -> Vec<(f64, f64)> {
    let gh = GaussHermite::new(NonZeroUsize::new(order).expect("order checked positive"));
    let s = std::f64::consts::PI.sqrt();
    gh.as_node_weight_pairs()
        .iter()
        .map(|&(t, w)| (std::f64::consts::SQRT_2 * t, w / s))
        .collect()
}

/// Dense evaluator over a flat weight vector (layer-major, row-major), kept
/// separate from the main forward pass.
pub(crate) struct FlatNet {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    x: Vec<f64>,
    y: Vec<usize>,
    scratch_len: usize,
}

impl FlatNet {
    pub(crate) fn new(arch: &NetworkArch, data: &LabeledDataset) -> Self {
        let widths = arch.widths().to_vec();
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut acc = 0;
        for l in 0..widths.len() - 1 {
            offsets.push(acc);
            acc += (widths[l] + 1) * widths[l + 1];
        }
        Self {
            scratch_len: *widths.iter().max().unwrap(),
            offsets,
            x: data.features().iter().copied().collect(),
            y: data.labels().to_vec(),
            widths,
        }
    }

    pub(crate) fn scratch(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.scratch_len], vec![0.0; self.scratch_len])
    }

    /// `sum_i log p(y_i | x_i, w)` with the usual probability floor.
    pub(crate) fn loglik(&self, w: &[f64], a: &mut [f64], b: &mut [f64]) -> f64 {
        let d = self.widths[0];
        let layers = self.widths.len() - 1;
        let floor = PROB_FLOOR.ln();
        let mut total = 0.0;
        for (i, &y) in self.y.iter().enumerate() {
            a[..d].copy_from_slice(&self.x[i * d..(i + 1) * d]);
            let (mut cur, mut nxt) = (&mut *a, &mut *b);
            for l in 0..layers {
                let (p, q, off) = (self.widths[l], self.widths[l + 1], self.offsets[l]);
                for j in 0..q {
                    let mut z = w[off + j];
                    for k in 0..p {
                        z += cur[k] * w[off + (k + 1) * q + j];
                    }
                    nxt[j] = if l + 1 < layers { z.max(0.0) } else { z };
                }
                std::mem::swap(&mut cur, &mut nxt);
            }
            let c = self.widths[layers];
            let m = cur[..c].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + cur[..c].iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += (cur[y] - lse).max(floor);
        }
        total
    }
}

pub(crate) fn flatten<'a>(mats: impl IntoIterator<Item = &'a Array2<f64>>) -> Vec<f64> {
    mats.into_iter().flat_map(|m| m.iter().copied()).collect()
}

/// `E[loglik]` with the slots in `active` drawn from independent normals
/// `(mean, sd)` and every other slot fixed at zero.
fn gaussian_expectation(net: &FlatNet, q: usize, active: &[(usize, f64, f64)], rule: &[(f64, f64)]) -> f64 {
    let k = active.len();
    if k == 0 {
        let (mut a, mut b) = net.scratch();
        return net.loglik(&vec![0.0; q], &mut a, &mut b);
    }
    let n = rule.len();
    let inner: usize = n.pow(k as u32 - 1);
    let partial: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|first| {
            let (mut a, mut b) = net.scratch();
            let mut w = vec![0.0; q];
            let mut digits = vec![0usize; k];
            digits[0] = first;
            let mut acc = 0.0;
            for _ in 0..inner {
                let mut weight = 1.0;
                for (d, &(slot, mean, sd)) in digits.iter().zip(active) {
                    let (t, wt) = rule[*d];
                    w[slot] = mean + sd * t;
                    weight *= wt;
                }
                acc += weight * net.loglik(&w, &mut a, &mut b);
                for d in digits[1..].iter_mut() {
                    *d += 1;
                    if *d < n {
                        break;
                    }
                    *d = 0;
                }
            }
            acc
        })
        .collect();
    partial.iter().sum()
}

/// Same integral on the log scale: `log E[exp(loglik)]`.
fn gaussian_log_evidence(net: &FlatNet, q: usize, active: &[usize], sd: f64, rule: &[(f64, f64)]) -> f64 {
    let k = active.len();
    if k == 0 {
        let (mut a, mut b) = net.scratch();
        return net.loglik(&vec![0.0; q], &mut a, &mut b);
    }
    let n = rule.len();
    let inner: usize = n.pow(k as u32 - 1);
    let terms: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|first| {
            let (mut a, mut b) = net.scratch();
            let mut w = vec![0.0; q];
            let mut digits = vec![0usize; k];
            digits[0] = first;
            let mut logs = Vec::with_capacity(inner);
            for _ in 0..inner {
                let mut lw = 0.0;
                for (d, &slot) in digits.iter().zip(active) {
                    let (t, wt) = rule[*d];
                    w[slot] = sd * t;
                    lw += wt.ln();
                }
                logs.push(lw + net.loglik(&w, &mut a, &mut b));
                for d in digits[1..].iter_mut() {
                    *d += 1;
                    if *d < n {
                        break;
                    }
                    *d = 0;
                }
            }
            let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (m, logs.iter().map(|l| (l - m).exp()).sum())
        })
        .collect();
    logsumexp_scaled(&terms)
}

fn logsumexp_scaled(terms: &[(f64, f64)]) -> f64 {
    let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|&(l, s)| s * (l - m).exp()).sum::<f64>().ln()
}

fn active_slots(mask: u32, q: usize) -> Vec<usize> {
    (0..q).filter(|s| mask >> s & 1 == 1).collect()
}

fn check_dims(active: usize) -> Result<()> {
    if active > MAX_QUAD_DIMS {
        Err(Error::Capacity(format!(
            "mask with {active} active slots exceeds {MAX_QUAD_DIMS} quadrature dimensions"
        )))
    } else {
        Ok(())
    }
}

/// `sum_gamma q(gamma) E_q[log p(D | beta, gamma)]` by enumeration and quadrature.
pub fn exact_expected_loglik(instance: &TinyInstance, state: &VariationalState) -> Result<f64> {
    state.check_arch(&instance.arch)?;
    let q = instance.slots();
    let net = instance.net();
    let rule = instance.rule();
    let layers = state.layers();
    let mu = flatten(layers.iter().map(|p| &p.mu));
    let sigma = flatten(&state.sigma());
    let omega = flatten(layers.iter().map(|p| &p.omega));
    let mut total = 0.0;
    for mask in 0..1u32 << q {
        let log_w: f64 = (0..q)
            .map(|s| {
                if mask >> s & 1 == 1 {
                    log_sigmoid(omega[s])
                } else {
                    log_sigmoid(-omega[s])
                }
            })
            .sum();
        let weight = log_w.exp();
        if weight == 0.0 {
            continue;
        }
        let active = active_slots(mask, q);
        check_dims(active.len())?;
        let spec: Vec<(usize, f64, f64)> = active.iter().map(|&s| (s, mu[s], sigma[s])).collect();
        total += weight * gaussian_expectation(&net, q, &spec, &rule);
    }
    Ok(total)
}

/// KL from the same quadrature: per slot,
/// `alpha (log alpha/psi + E_q[log N(beta; mu, sigma^2) - log N(beta; 0, sigma_beta^2)])
///  + (1 - alpha) log((1 - alpha)/(1 - psi))`.
pub fn kl_by_quadrature(state: &VariationalState, prior: &PriorConfig, order: usize) -> f64 {
    let rule = normal_rule(order);
    let (psi, sb2) = (prior.psi(), prior.sigma_beta_sq());
    let log_norm = |x: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
    let mut kl = 0.0;
    for (p, sig) in state.layers().iter().zip(state.sigma()) {
        for ((&mu, &w), &s) in p.mu.iter().zip(&p.omega).zip(&sig) {
            let (la, l1a) = (log_sigmoid(w), log_sigmoid(-w));
            let (a, b) = (la.exp(), l1a.exp());
            if a > 0.0 {
                let e: f64 = rule
                    .iter()
                    .map(|&(t, wt)| {
                        let beta = mu + s * t;
                        wt * (log_norm(beta, mu, s * s) - log_norm(beta, 0.0, sb2))
                    })
                    .sum();
                kl += a * (la - psi.ln() + e);
            }
            if b > 0.0 {
                kl += b * (l1a - (1.0 - psi).ln());
            }
        }
    }
    kl
}

/// Exact ELBO: enumeration plus quadrature for the likelihood term; the KL
/// term is the closed form or, for [`KlMode::MonteCarlo`], the expected log
/// ratio integrated by quadrature.
pub fn exact_elbo(instance: &TinyInstance, state: &VariationalState, kl_mode: KlMode) -> Result<f64> {
    let ll = exact_expected_loglik(instance, state)?;
    let kl = match kl_mode {
        KlMode::Analytic => kl_analytic(state, &instance.prior),
        KlMode::MonteCarlo => kl_by_quadrature(state, &instance.prior, instance.order),
    };
    Ok(ll - kl)
}

/// Exact posterior over masks under the spike-and-slab prior.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub log_evidence: f64,
    /// `p(gamma | D)` indexed by mask bits (slot `s` is bit `s`).
    pub mask_probs: Vec<f64>,
    pub marginals: Vec<Array2<f64>>,
}

pub fn exact_posterior(instance: &TinyInstance) -> Result<ExactPosterior> {
    let q = instance.slots();
    let net = instance.net();
    let rule = instance.rule();
    let psi = instance.prior.psi();
    let sd = instance.prior.sigma_beta_sq().sqrt();
    let mut log_joint = Vec::with_capacity(1 << q);
    for mask in 0..1u32 << q {
        let active = active_slots(mask, q);
        check_dims(active.len())?;
        let k = active.len() as f64;
        let log_prior = k * psi.ln() + (q as f64 - k) * (1.0 - psi).ln();
        log_joint.push(log_prior + gaussian_log_evidence(&net, q, &active, sd, &rule));
    }
    let m = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_evidence = m + log_joint.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let mask_probs: Vec<f64> = log_joint.iter().map(|l| (l - log_evidence).exp()).collect();
    let mut flat_marg = vec![0.0; q];
    for (mask, p) in mask_probs.iter().enumerate() {
        for (s, m) in flat_marg.iter_mut().enumerate() {
            if mask >> s & 1 == 1 {
                *m += p;
            }
        }
    }
    let mut it = flat_marg.into_iter();
    let marginals = (0..instance.arch.num_layers())
        .map(|l| Array2::from_shape_simple_fn(instance.arch.layer_shape(l), || it.next().unwrap()))
        .collect();
    Ok(ExactPosterior {
        log_evidence,
        mask_probs,
        marginals,
    })
}

/// `p(gamma_s = 1 | D)` for every slot.
pub fn exact_marginal_inclusion(instance: &TinyInstance) -> Result<Vec<Array2<f64>>> {
    Ok(exact_posterior(instance)?.marginals)
}

pub fn exact_log_evidence(instance: &TinyInstance) -> Result<f64> {
    Ok(exact_posterior(instance)?.log_evidence)
}

/// The mode of the factorized `q(gamma)` found by brute force (first mask on ties).
pub fn factorized_argmax(state: &VariationalState) -> Result<SlotMask> {
    let q = state.total_slots();
    if q > MAX_SLOTS {
        return Err(Error::Capacity(format!("{q} slots, enumeration handles at most {MAX_SLOTS}")));
    }
    let omega = flatten(state.layers().iter().map(|p| &p.omega));
    let mut best = (f64::NEG_INFINITY, 0u32);
    for mask in 0..1u32 << q {
        let lq: f64 = (0..q)
            .map(|s| if mask >> s & 1 == 1 { log_sigmoid(omega[s]) } else { log_sigmoid(-omega[s]) })
            .sum();
        if lq > best.0 {
            best = (lq, mask);
        }
    }
    let mut s = 0;
    Ok(state
        .shapes()
        .into_iter()
        .map(|shape| {
            Array2::from_shape_simple_fn(shape, || {
                let on = best.1 >> s & 1 == 1;
                s += 1;
                on
            })
        })
        .collect())
}
