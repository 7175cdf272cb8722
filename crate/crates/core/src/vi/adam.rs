use ndarray::{Array2, Zip};

use crate::model::VariationalState;
use crate::vi::GradientEstimate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub mu: f64,
    pub rho: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Moments {
    fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }
}

/// ADAM moment accumulators for the three parameter groups. Updates ascend
/// the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    mu: Moments,
    rho: Moments,
    omega: Moments,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            mu: Moments::zeros(shapes),
            rho: Moments::zeros(shapes),
            omega: Moments::zeros(shapes),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_state(state: &VariationalState) -> Self {
        Self::new(&state.shapes())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One ascent step. Groups with a zero learning rate, and slots outside
    /// `active` when one is given, are left bitwise untouched.
    pub fn apply(
        &mut self,
        state: &mut VariationalState,
        grad: &GradientEstimate,
        lr: LearningRates,
        active: Option<&[Array2<bool>]>,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (l, layer) in state.layers_mut().iter_mut().enumerate() {
            let groups = [
                (&mut layer.mu, &grad.d_mu[l], &mut self.mu, lr.mu),
                (&mut layer.rho, &grad.d_rho[l], &mut self.rho, lr.rho),
                (&mut layer.omega, &grad.d_omega[l], &mut self.omega, lr.omega),
            ];
            for (param, g, mom, rate) in groups {
                if rate == 0.0 {
                    continue;
                }
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p += rate * m_hat / (v_hat.sqrt() + eps);
                };
                let zip = Zip::from(param)
                    .and(&mut mom.m[l])
                    .and(&mut mom.v[l])
                    .and(g);
                match active {
                    Some(mask) => zip.and(&mask[l]).for_each(|p, m, v, &g, &on| {
                        if on {
                            update(p, m, v, g)
                        }
                    }),
                    None => zip.for_each(|p, m, v, &g| update(p, m, v, g)),
                }
            }
        }
    }
}
