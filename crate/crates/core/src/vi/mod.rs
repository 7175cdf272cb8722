//! Doubly stochastic variational inference: ELBO estimation, the two gradient
//! estimators, ADAM updates and the training / post-training drivers.

mod adam;
mod estimators;
pub mod kl;
mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParamGroup, Result};

pub use adam::{AdamState, LearningRates};
pub use estimators::{
    batch_loglik, elbo_estimate, grad_fixed_mask, grad_relaxed, grad_score, BaselineState,
};
pub use kl::{kl_analytic, kl_gradient, kl_mc_term};
pub use train::{
    dsvi_step, post_train, step_on_batch, train, EpochDiagnostics, PostTrainMode, StepDiagnostics,
    TrainHistory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Relaxed,
    ScoreFunction,
}

impl Estimator {
    pub fn code(self) -> u8 {
        match self {
            Estimator::Relaxed => 0,
            Estimator::ScoreFunction => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Estimator::Relaxed),
            1 => Some(Estimator::ScoreFunction),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub mc_samples: usize,
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub lr_omega: f64,
    pub epochs: usize,
    pub estimator: Estimator,
    /// Relaxation temperature for [`Estimator::Relaxed`].
    pub delta: f64,
    /// EMA decay of the score-function baseline.
    pub baseline_decay: f64,
    pub seed: u64,
    pub kl_mode: KlMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            mc_samples: 1,
            lr_mu: 1e-4,
            lr_rho: 1e-4,
            lr_omega: 0.1,
            epochs: 250,
            estimator: Estimator::Relaxed,
            delta: 0.1,
            baseline_decay: 0.99,
            seed: 0,
            kl_mode: KlMode::Analytic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_total: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n_total {
            return Err(Error::InvalidParameter(format!(
                "batch size must lie in 1..={n_total}, got {}",
                self.batch_size
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidParameter("mc_samples must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_mu", self.lr_mu),
            ("lr_rho", self.lr_rho),
            ("lr_omega", self.lr_omega),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be a nonnegative finite number, got {lr}"
                )));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::InvalidParameter(format!(
                "baseline_decay must lie in [0, 1), got {}",
                self.baseline_decay
            )));
        }
        Ok(())
    }

    pub fn learning_rates(&self) -> LearningRates {
        LearningRates {
            mu: self.lr_mu,
            rho: self.lr_rho,
            omega: self.lr_omega,
        }
    }
}

/// Ascent direction for the ELBO, one matrix per layer and parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub d_mu: Vec<Array2<f64>>,
    pub d_rho: Vec<Array2<f64>>,
    pub d_omega: Vec<Array2<f64>>,
    /// Objective value of the draws behind this estimate (scaled
    /// log-likelihood minus KL, averaged over MC draws).
    pub objective: f64,
}

impl GradientEstimate {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        let z = || shapes.iter().map(|&s| Array2::zeros(s)).collect::<Vec<_>>();
        Self {
            d_mu: z(),
            d_rho: z(),
            d_omega: z(),
            objective: 0.0,
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|m| *m *= c);
        }
        self.objective *= c;
    }

    /// `self -= other` on the gradient matrices (objective untouched).
    pub fn sub_assign(&mut self, other: &GradientEstimate) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x -= y;
            }
        }
    }

    pub fn groups(&self) -> [&Vec<Array2<f64>>; 3] {
        [&self.d_mu, &self.d_rho, &self.d_omega]
    }

    fn groups_mut(&mut self) -> [&mut Vec<Array2<f64>>; 3] {
        [&mut self.d_mu, &mut self.d_rho, &mut self.d_omega]
    }

    /// Flattened `(mu, rho, omega)` concatenation, layer-major, row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.groups()
            .into_iter()
            .flat_map(|g| g.iter().flat_map(|m| m.iter().copied()))
            .collect()
    }

    /// Euclidean norms of the three groups.
    pub fn norms(&self) -> [f64; 3] {
        self.groups().map(|g| {
            g.iter()
                .map(|m| m.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        let groups = [ParamGroup::Mu, ParamGroup::Rho, ParamGroup::Omega];
        for (group, mats) in groups.into_iter().zip(self.groups()) {
            for (layer, m) in mats.iter().enumerate() {
                if let Some(((row, col), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NumericalFailure {
                        group,
                        layer,
                        row,
                        col,
                    });
                }
            }
        }
        Ok(())
    }
}
