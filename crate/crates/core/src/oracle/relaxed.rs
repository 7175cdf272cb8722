//! The temperature-`delta` relaxed ELBO, integrated jointly over the uniforms
//! `nu` and the slab normals `eps` with a randomly shifted Halton design.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{logit, sigmoid, VariationalState};
use crate::oracle::{flatten, TinyInstance};
use crate::rng::Stream;
use crate::vi::kl_analytic;

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];
const CHUNK: usize = 4096;

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut r) = (inv, 0.0);
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Fixed integration points: per point, `logit(nu_s)` and `eps_s` for every slot.
#[derive(Debug, Clone)]
pub struct QmcDesign {
    slots: usize,
    points: usize,
    logit_nu: Vec<f64>,
    eps: Vec<f64>,
}

impl QmcDesign {
    pub fn new(slots: usize, points: usize, seed: u64) -> Result<Self> {
        if 2 * slots > PRIMES.len() {
            return Err(Error::Capacity(format!("{slots} slots exceed the Halton dimension table")));
        }
        if points == 0 {
            return Err(Error::InvalidArgument("QMC design needs at least one point".into()));
        }
        let mut rng = Stream::new(seed);
        let shift: Vec<f64> = (0..2 * slots).map(|_| rng.uniform()).collect();
        let std = Normal::standard();
        let clamp = |u: f64| u.clamp(1e-15, 1.0 - 1e-15);
        let mut logit_nu = Vec::with_capacity(points * slots);
        let mut eps = Vec::with_capacity(points * slots);
        for i in 1..=points as u64 {
            for s in 0..slots {
                let u = (radical_inverse(i, PRIMES[s]) + shift[s]).fract();
                logit_nu.push(logit(clamp(u)));
            }
            for s in 0..slots {
                let u = (radical_inverse(i, PRIMES[slots + s]) + shift[slots + s]).fract();
                eps.push(std.inverse_cdf(clamp(u)));
            }
        }
        Ok(Self {
            slots,
            points,
            logit_nu,
            eps,
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }
}

/// `E_{nu, eps}[log p(D | gamma_tilde * beta)] - KL` on a given design.
pub fn relaxed_elbo_on(
    instance: &TinyInstance,
    state: &VariationalState,
    delta: f64,
    design: &QmcDesign,
) -> Result<f64> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    state.check_arch(&instance.arch)?;
    let q = instance.slots();
    if design.slots != q {
        return Err(Error::Shape(format!("design has {} slots, instance {q}", design.slots)));
    }
    let net = instance.net();
    let layers = state.layers();
    let mu = flatten(layers.iter().map(|p| &p.mu));
    let sigma = flatten(&state.sigma());
    let omega = flatten(layers.iter().map(|p| &p.omega));
    let chunks = design.points.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let (mut a, mut b) = net.scratch();
            let mut w = vec![0.0; q];
            let mut acc = 0.0;
            for p in c * CHUNK..((c + 1) * CHUNK).min(design.points) {
                let ln = &design.logit_nu[p * q..(p + 1) * q];
                let e = &design.eps[p * q..(p + 1) * q];
                for s in 0..q {
                    w[s] = sigmoid((omega[s] - ln[s]) / delta) * (mu[s] + sigma[s] * e[s]);
                }
                acc += net.loglik(&w, &mut a, &mut b);
            }
            acc
        })
        .collect();
    let ll = partial.iter().sum::<f64>() / design.points as f64;
    Ok(ll - kl_analytic(state, &instance.prior))
}

/// Relaxed ELBO with `mc_over_nu` quasi-random points (fixed shift seed).
pub fn exact_relaxed_elbo(
    instance: &TinyInstance,
    state: &VariationalState,
    delta: f64,
    mc_over_nu: usize,
) -> Result<f64> {
    let design = QmcDesign::new(instance.slots(), mc_over_nu, 0)?;
    relaxed_elbo_on(instance, state, delta, &design)
}
