//! KL divergence between the factorized spike-and-slab family and the prior.
//!
//! Per slot, with `r = sigma^2 / sigma_beta^2`,
//!
//! ```text
//! KL = alpha * [log(alpha/psi) + (r - 1 - log r)/2 + mu^2 / (2 sigma_beta^2)]
//!    + (1 - alpha) * log((1 - alpha)/(1 - psi))
//! ```
//!
//! The Bernoulli and Gaussian parts are each nonnegative; both are clamped at
//! zero so rounding never produces a negative divergence, and both vanish
//! exactly when the slot's parameters equal the prior bit-for-bit.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{log_sigmoid, log_softplus, sigmoid, softplus, MaskedSample, PriorConfig, VariationalState};
use crate::vi::GradientEstimate;

/// Slab variance ratio and its log, falling back to log space when
/// `sigma^2` underflows.
fn variance_ratio(rho: f64, prior: &PriorConfig) -> (f64, f64) {
    let sigma = softplus(rho);
    let r = sigma * sigma / prior.sigma_beta_sq();
    let log_r = if r >= f64::MIN_POSITIVE {
        r.ln()
    } else {
        2.0 * log_softplus(rho) - prior.sigma_beta_sq().ln()
    };
    (r, log_r)
}

fn gaussian_kl(mu: f64, rho: f64, prior: &PriorConfig) -> f64 {
    let (r, log_r) = variance_ratio(rho, prior);
    let kl = 0.5 * (r - 1.0 - log_r) + mu * mu / (2.0 * prior.sigma_beta_sq());
    kl.max(0.0)
}

fn xlogy_ratio(x: f64, num: f64, den: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (num / den).ln()
    }
}

/// KL contribution of a single slot.
pub fn kl_slot(mu: f64, rho: f64, omega: f64, prior: &PriorConfig) -> f64 {
    let alpha = sigmoid(omega);
    let not_alpha = sigmoid(-omega);
    let psi = prior.psi();
    let bernoulli =
        (xlogy_ratio(alpha, alpha, psi) + xlogy_ratio(not_alpha, not_alpha, 1.0 - psi)).max(0.0);
    let gauss = if alpha == 0.0 {
        0.0
    } else {
        alpha * gaussian_kl(mu, rho, prior)
    };
    bernoulli + gauss
}

/// Partial derivatives `(dKL/dmu, dKL/drho, dKL/domega)` of a single slot.
pub fn kl_slot_grad(mu: f64, rho: f64, omega: f64, prior: &PriorConfig) -> (f64, f64, f64) {
    let alpha = sigmoid(omega);
    let sb2 = prior.sigma_beta_sq();
    let d_mu = alpha * mu / sb2;
    let (d_sigma_part, inv_part) = slab_scale_terms(rho, sb2);
    let d_rho = alpha * (d_sigma_part - inv_part);
    // dKL/dalpha = log(alpha/psi) - log((1-alpha)/(1-psi)) + KL_gauss = omega - logit(psi) + KL_gauss
    let d_alpha = omega - prior.logit_psi() + gaussian_kl(mu, rho, prior);
    let d_omega = alpha * sigmoid(-omega) * d_alpha;
    (d_mu, d_rho, d_omega)
}

/// Returns `(sigma * s / sigma_beta^2, s / sigma)` where `s = dsigma/drho`.
fn slab_scale_terms(rho: f64, sb2: f64) -> (f64, f64) {
    let sigma = softplus(rho);
    let s = sigmoid(rho);
    let s_over_sigma = if rho < -36.0 { 1.0 } else { s / sigma };
    (sigma * s / sb2, s_over_sigma)
}

/// Gradient of the KL with respect to the slab parameters when the slot is
/// forced into the model (`alpha = 1`), used by structure-frozen post-training.
pub fn gaussian_kl_slot_grad(mu: f64, rho: f64, prior: &PriorConfig) -> (f64, f64) {
    let sb2 = prior.sigma_beta_sq();
    let (a, b) = slab_scale_terms(rho, sb2);
    (mu / sb2, a - b)
}

/// Closed-form `KL(q || p)` summed over all slots.
pub fn kl_analytic(state: &VariationalState, prior: &PriorConfig) -> f64 {
    state
        .layers()
        .iter()
        .map(|p| {
            let mut acc = 0.0;
            ndarray::Zip::from(&p.mu)
                .and(&p.rho)
                .and(&p.omega)
                .for_each(|&m, &r, &w| acc += kl_slot(m, r, w, prior));
            acc
        })
        .sum()
}

/// Gradient of [`kl_analytic`] with respect to `(mu, rho, omega)`.
pub fn kl_gradient(state: &VariationalState, prior: &PriorConfig) -> GradientEstimate {
    let mut g = GradientEstimate::zeros(&state.shapes());
    for (l, p) in state.layers().iter().enumerate() {
        ndarray::Zip::from(&mut g.d_mu[l])
            .and(&mut g.d_rho[l])
            .and(&mut g.d_omega[l])
            .and(&p.mu)
            .and(&p.rho)
            .and(&p.omega)
            .for_each(|dm, dr, dw, &m, &r, &w| {
                let (a, b, c) = kl_slot_grad(m, r, w, prior);
                *dm = a;
                *dr = b;
                *dw = c;
            });
    }
    g
}

fn log_normal_std(z: f64, log_sigma: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - log_sigma - 0.5 * z * z
}

/// Single-draw log ratio `log q(beta, gamma) - log p(beta | gamma) p(gamma)`.
/// Spike densities cancel on excluded slots.
pub fn kl_mc_term(state: &VariationalState, prior: &PriorConfig, sample: &MaskedSample) -> Result<f64> {
    if sample.layers.len() != state.layers().len() {
        return Err(Error::Shape("sample and state have different depths".into()));
    }
    let log_psi = prior.psi().ln();
    let log_not_psi = (-prior.psi()).ln_1p();
    let log_sb = 0.5 * prior.sigma_beta_sq().ln();
    let sb = prior.sigma_beta_sq().sqrt();
    let mut total = 0.0;
    for (l, (p, s)) in state.layers().iter().zip(&sample.layers).enumerate() {
        if s.gamma.dim() != p.dim() {
            return Err(Error::Shape(format!("sample layer {l} shape mismatch")));
        }
        for ((k, j), &g) in s.gamma.indexed_iter() {
            let omega = p.omega[[k, j]];
            if g {
                if sigmoid(omega) == 0.0 {
                    return Err(Error::Inconsistent(format!(
                        "slot ({l}, {k}, {j}) is included but has alpha = 0"
                    )));
                }
                let rho = p.rho[[k, j]];
                let sigma = softplus(rho);
                let beta = s.beta[[k, j]];
                let z = if sigma >= f64::MIN_POSITIVE {
                    (beta - p.mu[[k, j]]) / sigma
                } else {
                    s.eps[[k, j]]
                };
                total += log_sigmoid(omega) + log_normal_std(z, log_softplus(rho))
                    - log_psi
                    - log_normal_std(beta / sb, log_sb);
            } else {
                if sigmoid(-omega) == 0.0 {
                    return Err(Error::Inconsistent(format!(
                        "slot ({l}, {k}, {j}) is excluded but has alpha = 1"
                    )));
                }
                total += log_sigmoid(-omega) - log_not_psi;
            }
        }
    }
    Ok(total)
}

/// Per-layer `alpha`-weighted KL contributions, handy for diagnostics.
pub fn kl_per_layer(state: &VariationalState, prior: &PriorConfig) -> Vec<f64> {
    state
        .layers()
        .iter()
        .map(|p| {
            let kl: Array2<f64> = ndarray::Zip::from(&p.mu)
                .and(&p.rho)
                .and(&p.omega)
                .map_collect(|&m, &r, &w| kl_slot(m, r, w, prior));
            kl.sum()
        })
        .collect()
}
