use ndarray::{Array2, Zip};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{
    forward_batch, loglik_and_grad, sample_masked, sample_relaxed, sample_with_mask, sigmoid,
    NetworkArch, PriorConfig, VariationalState, PROB_FLOOR,
};
use crate::rng::Stream;
use crate::vi::kl::{gaussian_kl_slot_grad, kl_analytic, kl_gradient, kl_mc_term};
use crate::vi::{GradientEstimate, KlMode, TrainConfig};

/// Input-independent control variate for the score-function estimator: an
/// exponential moving average of the minibatch-scaled log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    value: f64,
    decay: f64,
    initialized: bool,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        Self {
            value: 0.0,
            decay,
            initialized: false,
        }
    }

    /// A baseline pinned at `value`; it still updates if passed to [`grad_score`].
    pub fn fixed(value: f64, decay: f64) -> Self {
        Self {
            value,
            decay,
            initialized: true,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `b <- decay * b + (1 - decay) * f`; the first update adopts `f` directly.
    pub fn update(&mut self, f: f64) {
        if self.initialized {
            self.value = self.decay * self.value + (1.0 - self.decay) * f;
        } else {
            self.value = f;
            self.initialized = true;
        }
    }
}

fn check_inputs(
    state: &VariationalState,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    if batch.len() > n_total {
        return Err(Error::InvalidArgument(format!(
            "minibatch of {} exceeds dataset size {n_total}",
            batch.len()
        )));
    }
    if batch.inputs.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, architecture expects {}",
            batch.inputs.ncols(),
            arch.input_dim()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= arch.class_count()) {
        return Err(Error::Index {
            index: y,
            len: arch.class_count(),
        });
    }
    state.check_arch(arch)?;
    Ok(n_total as f64 / batch.len() as f64)
}

/// Summed log-likelihood of `batch` under fixed effective weights.
pub fn batch_loglik(arch: &NetworkArch, weights: &[Array2<f64>], batch: &Batch) -> Result<f64> {
    let probs = forward_batch(arch, weights, batch.inputs.view())?;
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs[[i, y]].max(PROB_FLOOR).ln())
        .sum())
}

/// Monte-Carlo ELBO estimate from `M` hard draws:
/// `(1/M) sum_m [(n/N) sum_i log p(y_i | x_i, theta_m, gamma_m) - KL_m]`,
/// with `KL_m` the closed form or the single-draw log ratio per `kl_mode`.
pub fn elbo_estimate(
    state: &VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
    config: &TrainConfig,
    rng: &mut Stream,
) -> Result<f64> {
    let scale = check_inputs(state, arch, batch, n_total)?;
    if config.mc_samples == 0 {
        return Err(Error::InvalidParameter("mc_samples must be at least 1".into()));
    }
    let analytic = matches!(config.kl_mode, KlMode::Analytic).then(|| kl_analytic(state, prior));
    let mut acc = 0.0;
    for _ in 0..config.mc_samples {
        let sample = sample_masked(state, rng);
        let ll = batch_loglik(arch, &sample.weights(), batch)?;
        let kl = match analytic {
            Some(kl) => kl,
            None => kl_mc_term(state, prior, &sample)?,
        };
        acc += scale * ll - kl;
    }
    Ok(acc / config.mc_samples as f64)
}

/// Pathwise gradient of the temperature-`delta` relaxed ELBO. The forward
/// pass uses `gamma_tilde * beta`; the likelihood gradient flows to `omega`
/// through `gamma_tilde` and to `(mu, rho)` through `beta`. The KL gradient is
/// taken from the closed form.
pub fn grad_relaxed(
    state: &VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
    config: &TrainConfig,
    rng: &mut Stream,
) -> Result<GradientEstimate> {
    let scale = check_inputs(state, arch, batch, n_total)?;
    let delta = config.delta;
    let m = config.mc_samples.max(1);
    let mut g = GradientEstimate::zeros(&state.shapes());
    for _ in 0..m {
        let sample = sample_relaxed(state, delta, rng)?;
        let (ll, gw) = loglik_and_grad(&sample.weights(), batch.inputs.view(), &batch.labels);
        g.objective += scale * ll;
        for (l, (layer, p)) in sample.layers.iter().zip(state.layers()).enumerate() {
            Zip::from(&mut g.d_mu[l])
                .and(&mut g.d_rho[l])
                .and(&gw[l])
                .and(&layer.gamma_tilde)
                .and(&layer.eps)
                .and(&p.rho)
                .for_each(|dm, dr, &gw, &gt, &e, &r| {
                    let gm = scale * gw * gt;
                    *dm += gm;
                    *dr += gm * e * sigmoid(r);
                });
            Zip::from(&mut g.d_omega[l])
                .and(&gw[l])
                .and(&layer.gamma_tilde)
                .and(&layer.beta)
                .for_each(|dw, &gw, &gt, &b| {
                    *dw += scale * gw * b * gt * (1.0 - gt) / delta;
                });
        }
    }
    g.scale(1.0 / m as f64);
    g.sub_assign(&kl_gradient(state, prior));
    g.objective -= kl_analytic(state, prior);
    g.check_finite()?;
    Ok(g)
}

/// Score-function gradient for `omega` (`(f - b) * (gamma - alpha)` with the
/// baseline `b`), pathwise gradients for `(mu, rho)` on included slots, and
/// the closed-form KL gradient. The baseline is updated after use with the
/// mean scaled log-likelihood of this call's draws.
#[allow(clippy::too_many_arguments)]
pub fn grad_score(
    state: &VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
    config: &TrainConfig,
    rng: &mut Stream,
    baseline: &mut BaselineState,
) -> Result<GradientEstimate> {
    let scale = check_inputs(state, arch, batch, n_total)?;
    let m = config.mc_samples.max(1);
    let b = baseline.value();
    let alpha = state.alpha();
    let mut g = GradientEstimate::zeros(&state.shapes());
    let mut f_sum = 0.0;
    for _ in 0..m {
        let sample = sample_masked(state, rng);
        let (ll, gw) = loglik_and_grad(&sample.weights(), batch.inputs.view(), &batch.labels);
        let f = scale * ll;
        f_sum += f;
        for (l, (layer, p)) in sample.layers.iter().zip(state.layers()).enumerate() {
            Zip::from(&mut g.d_mu[l])
                .and(&mut g.d_rho[l])
                .and(&gw[l])
                .and(&layer.gamma)
                .and(&layer.eps)
                .and(&p.rho)
                .for_each(|dm, dr, &gw, &on, &e, &r| {
                    if on {
                        let gm = scale * gw;
                        *dm += gm;
                        *dr += gm * e * sigmoid(r);
                    }
                });
            Zip::from(&mut g.d_omega[l])
                .and(&layer.gamma)
                .and(&alpha[l])
                .for_each(|dw, &on, &a| {
                    *dw += (f - b) * (f64::from(u8::from(on)) - a);
                });
        }
    }
    g.objective = f_sum;
    g.scale(1.0 / m as f64);
    g.sub_assign(&kl_gradient(state, prior));
    g.objective -= kl_analytic(state, prior);
    baseline.update(f_sum / m as f64);
    g.check_finite()?;
    Ok(g)
}

/// Gradient for post-training on a frozen structure: `gamma` is fixed to
/// `mask`, slabs are sampled on included slots only, and the KL is the slab
/// Gaussian KL of included slots. `d_omega` and excluded slots are zero.
#[allow(clippy::too_many_arguments)]
pub fn grad_fixed_mask(
    state: &VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
    config: &TrainConfig,
    rng: &mut Stream,
    mask: &[Array2<bool>],
) -> Result<GradientEstimate> {
    let scale = check_inputs(state, arch, batch, n_total)?;
    arch.check_layers(mask, "mask")?;
    let m = config.mc_samples.max(1);
    let mut g = GradientEstimate::zeros(&state.shapes());
    for _ in 0..m {
        let sample = sample_with_mask(state, mask, rng);
        let (ll, gw) = loglik_and_grad(&sample.weights(), batch.inputs.view(), &batch.labels);
        g.objective += scale * ll;
        for (l, (layer, p)) in sample.layers.iter().zip(state.layers()).enumerate() {
            Zip::from(&mut g.d_mu[l])
                .and(&mut g.d_rho[l])
                .and(&gw[l])
                .and(&layer.gamma)
                .and(&layer.eps)
                .and(&p.rho)
                .for_each(|dm, dr, &gw, &on, &e, &r| {
                    if on {
                        let gm = scale * gw;
                        *dm += gm;
                        *dr += gm * e * sigmoid(r);
                    }
                });
        }
    }
    g.scale(1.0 / m as f64);
    for (l, p) in state.layers().iter().enumerate() {
        Zip::from(&mut g.d_mu[l])
            .and(&mut g.d_rho[l])
            .and(&mask[l])
            .and(&p.mu)
            .and(&p.rho)
            .for_each(|dm, dr, &on, &mu, &rho| {
                if on {
                    let (km, kr) = gaussian_kl_slot_grad(mu, rho, prior);
                    *dm -= km;
                    *dr -= kr;
                }
            });
    }
    g.check_finite()?;
    Ok(g)
}
