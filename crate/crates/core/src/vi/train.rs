use ndarray::Array2;
use rand::seq::index;

use crate::data::{batches, Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::inference::{check_feasibility, median_model, Structure};
use crate::model::{NetworkArch, PriorConfig, VariationalState};
use crate::rng::Stream;
use crate::vi::estimators::{grad_fixed_mask, grad_relaxed, grad_score, BaselineState};
use crate::vi::{AdamState, Estimator, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Objective value of the step's draws (scaled log-likelihood minus KL).
    pub elbo: f64,
    pub grad_norm_mu: f64,
    pub grad_norm_rho: f64,
    pub grad_norm_omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub steps: usize,
    pub mean_elbo: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostTrainMode {
    /// Keep sampling `gamma ~ Bernoulli(alpha)` with `omega` frozen.
    SampledGamma,
    /// Freeze `gamma = I(alpha > 0.5)`; only included slabs are updated.
    MedianModel,
}

/// One optimizer step on a given minibatch. `frozen` fixes the structure for
/// median-model post-training.
#[allow(clippy::too_many_arguments)]
pub fn step_on_batch(
    state: &mut VariationalState,
    adam: &mut AdamState,
    baseline: &mut BaselineState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    batch: &Batch,
    n_total: usize,
    config: &TrainConfig,
    rng: &mut Stream,
    frozen: Option<&[Array2<bool>]>,
) -> Result<StepDiagnostics> {
    let grad = match (frozen, config.estimator) {
        (Some(mask), _) => grad_fixed_mask(state, prior, arch, batch, n_total, config, rng, mask)?,
        (None, Estimator::Relaxed) => grad_relaxed(state, prior, arch, batch, n_total, config, rng)?,
        (None, Estimator::ScoreFunction) => {
            grad_score(state, prior, arch, batch, n_total, config, rng, baseline)?
        }
    };
    let mut rates = config.learning_rates();
    if frozen.is_some() {
        rates.omega = 0.0;
    }
    adam.apply(state, &grad, rates, frozen);
    let [grad_norm_mu, grad_norm_rho, grad_norm_omega] = grad.norms();
    Ok(StepDiagnostics {
        elbo: grad.objective,
        grad_norm_mu,
        grad_norm_rho,
        grad_norm_omega,
    })
}

/// One doubly stochastic step: a uniform minibatch of `batch_size` indices
/// drawn without replacement, one gradient estimate, one ADAM update.
#[allow(clippy::too_many_arguments)]
pub fn dsvi_step(
    state: &mut VariationalState,
    adam: &mut AdamState,
    baseline: &mut BaselineState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut Stream,
) -> Result<StepDiagnostics> {
    config.validate(dataset.len())?;
    let idx = index::sample(rng.rng(), dataset.len(), config.batch_size).into_vec();
    let batch = dataset.gather(&idx);
    step_on_batch(
        state,
        adam,
        baseline,
        prior,
        arch,
        &batch,
        dataset.len(),
        config,
        rng,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    state: &mut VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut Stream,
    frozen: Option<&[Array2<bool>]>,
    callback: &mut dyn FnMut(&EpochDiagnostics),
) -> Result<TrainHistory> {
    config.validate(dataset.len())?;
    state.check_arch(arch)?;
    if dataset.dim() != arch.input_dim() || dataset.class_count() != arch.class_count() {
        return Err(Error::Shape(format!(
            "dataset ({} features, {} classes) does not fit architecture {arch}",
            dataset.dim(),
            dataset.class_count()
        )));
    }
    let mut adam = AdamState::for_state(state);
    let mut baseline = BaselineState::new(config.baseline_decay);
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut elbo_sum = 0.0;
        let plan = batches(dataset, config.batch_size, config.seed, epoch as u64)?;
        for idx in &plan {
            let batch = dataset.gather(idx);
            let diag = step_on_batch(
                state,
                &mut adam,
                &mut baseline,
                prior,
                arch,
                &batch,
                dataset.len(),
                config,
                rng,
                frozen,
            )?;
            elbo_sum += diag.elbo;
        }
        let diag = EpochDiagnostics {
            epoch,
            steps: plan.len(),
            mean_elbo: elbo_sum / plan.len() as f64,
        };
        callback(&diag);
        history.epochs.push(diag);
    }
    Ok(history)
}

/// Runs `config.epochs` epochs of reshuffled minibatch steps.
pub fn train(
    state: &mut VariationalState,
    prior: &PriorConfig,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut Stream,
    callback: &mut dyn FnMut(&EpochDiagnostics),
) -> Result<TrainHistory> {
    run_epochs(state, prior, arch, dataset, config, rng, None, callback)
}

/// Continues training the slab parameters with the inclusion logits frozen.
/// `omega` is never written in either mode.
#[allow(clippy::too_many_arguments)]
pub fn post_train(
    state: &mut VariationalState,
    mode: PostTrainMode,
    prior: &PriorConfig,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut Stream,
    callback: &mut dyn FnMut(&EpochDiagnostics),
) -> Result<TrainHistory> {
    let config = TrainConfig {
        lr_omega: 0.0,
        ..config.clone()
    };
    match mode {
        PostTrainMode::SampledGamma => {
            run_epochs(state, prior, arch, dataset, &config, rng, None, callback)
        }
        PostTrainMode::MedianModel => {
            let model = median_model(state);
            let report = check_feasibility(&model, arch);
            if !report.feasible {
                return Err(Error::Infeasible(report.message));
            }
            let mask = match model.structure {
                Structure::Selected(mask) => mask,
                Structure::Full => unreachable!("median model always selects slots"),
            };
            run_epochs(state, prior, arch, dataset, &config, rng, Some(&mask), callback)
        }
    }
}
