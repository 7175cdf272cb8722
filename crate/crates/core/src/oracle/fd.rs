use crate::error::{Error, Result};
use crate::model::VariationalState;
use crate::vi::GradientEstimate;

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_vec<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {eps}")));
    }
    let mut y = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + eps;
        let up = f(&y)?;
        y[i] = x[i] - eps;
        let down = f(&y)?;
        y[i] = x[i];
        g.push((up - down) / (2.0 * eps));
    }
    Ok(g)
}

fn param_mut(state: &mut VariationalState, group: usize, layer: usize, idx: usize) -> &mut f64 {
    let p = &mut state.layers_mut()[layer];
    let m = match group {
        0 => &mut p.mu,
        1 => &mut p.rho,
        _ => &mut p.omega,
    };
    let cols = m.ncols();
    &mut m[[idx / cols, idx % cols]]
}

/// Central-difference gradient over every `(mu, rho, omega)` coordinate.
pub fn finite_diff_grad<F>(mut f: F, state: &VariationalState, eps: f64) -> Result<GradientEstimate>
where
    F: FnMut(&VariationalState) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("step must be positive, got {eps}")));
    }
    let shapes = state.shapes();
    let mut g = GradientEstimate::zeros(&shapes);
    let mut work = state.clone();
    for group in 0..3 {
        for (layer, &(r, c)) in shapes.iter().enumerate() {
            for idx in 0..r * c {
                let x = *param_mut(&mut work, group, layer, idx);
                *param_mut(&mut work, group, layer, idx) = x + eps;
                let up = f(&work)?;
                *param_mut(&mut work, group, layer, idx) = x - eps;
                let down = f(&work)?;
                *param_mut(&mut work, group, layer, idx) = x;
                let target = match group {
                    0 => &mut g.d_mu[layer],
                    1 => &mut g.d_rho[layer],
                    _ => &mut g.d_omega[layer],
                };
                target[[idx / c, idx % c]] = (up - down) / (2.0 * eps);
            }
        }
    }
    Ok(g)
}

/// Gradient at step `eps` together with the step `eps / 2` estimate.
#[derive(Debug, Clone)]
pub struct CheckedGradient {
    pub grad: GradientEstimate,
    pub half_step: GradientEstimate,
    /// Largest componentwise gap between the two step sizes.
    pub max_discrepancy: f64,
}

pub fn finite_diff_checked<F>(mut f: F, state: &VariationalState, eps: f64) -> Result<CheckedGradient>
where
    F: FnMut(&VariationalState) -> Result<f64>,
{
    let grad = finite_diff_grad(&mut f, state, eps)?;
    let half_step = finite_diff_grad(&mut f, state, eps / 2.0)?;
    let max_discrepancy = grad
        .flatten()
        .iter()
        .zip(half_step.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(CheckedGradient {
        grad,
        half_step,
        max_discrepancy,
    })
}
