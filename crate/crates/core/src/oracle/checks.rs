//! Cross-module validation battery: stochastic estimator means against the
//! exact oracle at a fixed multiple of their standard errors.

use std::time::Instant;

use ndarray::{array, Array2};
use serde::Serialize;

use crate::data::{LabeledDataset, Provenance};
use crate::error::Result;
use crate::model::{logit, sample_masked, LayerParams, NetworkArch, PriorConfig, VariationalState};
use crate::oracle::{
    exact_elbo, exact_marginal_inclusion, finite_diff_grad, relaxed_elbo_on, QmcDesign, TinyInstance,
};
use crate::rng::{streams, Stream};
use crate::vi::{
    elbo_estimate, grad_relaxed, grad_score, kl_analytic, kl_mc_term, train, BaselineState,
    Estimator, KlMode, TrainConfig,
};

/// Agreement threshold in standard errors.
pub const Z_TOLERANCE: f64 = 3.0;

#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub draws: usize,
    pub kl_draws: usize,
    pub kl_states: usize,
    pub seed: u64,
    /// Constant added to every stochastic estimate; nonzero values must make the suite fail.
    pub inject_bias: f64,
    /// Quadrature order behind the exact ELBO value.
    pub elbo_order: usize,
    /// Quadrature order behind finite differences of the exact ELBO.
    pub fd_order: usize,
    pub fd_step: f64,
    pub qmc_points: usize,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            kl_draws: 100_000,
            kl_states: 20,
            seed: 20_240_601,
            inject_bias: 0.0,
            elbo_order: 20,
            fd_order: 10,
            fd_step: 1e-4,
            qmc_points: 1 << 18,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    /// Largest `|observed - expected| / se` over the compared components.
    pub max_z: f64,
    pub components: usize,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    pub std_err: Vec<f64>,
    pub seconds: f64,
    pub note: String,
}

/// Running mean and variance per component.
#[derive(Debug, Clone)]
pub struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn report(name: &str, observed: Vec<f64>, expected: Vec<f64>, std_err: Vec<f64>, start: Instant, note: String) -> CheckReport {
    let max_z = observed
        .iter()
        .zip(&expected)
        .zip(&std_err)
        .map(|((o, e), s)| z_score(o - e, *s))
        .fold(0.0, f64::max);
    CheckReport {
        name: name.into(),
        passed: max_z <= Z_TOLERANCE,
        max_z,
        components: observed.len(),
        observed,
        expected,
        std_err,
        seconds: start.elapsed().as_secs_f64(),
        note,
    }
}

fn rho_for(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

/// Fixed 1-1-2 instance with six slots. Both first-layer slabs sit many
/// standard deviations above zero, so the hidden pre-activation stays positive
/// at every quadrature node and the integrands are smooth.
pub fn reference_instance(order: usize) -> Result<TinyInstance> {
    let arch = NetworkArch::new(vec![1, 1, 2])?;
    let data = LabeledDataset::new(
        array![[0.2], [0.45], [0.7], [0.95]],
        vec![0, 0, 1, 1],
        2,
        Provenance::Synthetic,
    )?;
    TinyInstance::new(arch, data, PriorConfig::new(0.3, 1.0)?, order)
}

pub fn reference_state(arch: &NetworkArch) -> Result<VariationalState> {
    let layers = vec![
        LayerParams {
            mu: array![[1.0], [1.5]],
            rho: Array2::from_elem((2, 1), rho_for(0.1)),
            omega: array![[0.7], [0.6]].mapv(logit),
        },
        LayerParams {
            mu: array![[0.3, -0.2], [-1.0, 1.2]],
            rho: Array2::from_elem((2, 2), rho_for(0.4)),
            omega: array![[0.4, 0.55], [0.8, 0.65]].mapv(logit),
        },
    ];
    VariationalState::new(arch, layers)
}

fn full_batch_config(n: usize, estimator: Estimator, delta: f64) -> TrainConfig {
    TrainConfig {
        batch_size: n,
        mc_samples: 1,
        estimator,
        delta,
        kl_mode: KlMode::Analytic,
        ..TrainConfig::default()
    }
}

/// Mean of `draws` ELBO estimates (full batch, one draw, closed-form KL) against the exact ELBO.
pub fn check_elbo_unbiased(cfg: &BatteryConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let inst = reference_instance(cfg.elbo_order)?;
    let state = reference_state(&inst.arch)?;
    let exact = exact_elbo(&inst, &state, KlMode::Analytic)?;
    let batch = inst.data.all();
    let config = full_batch_config(inst.data.len(), Estimator::Relaxed, 0.1);
    let mut rng = Stream::with_id(cfg.seed, 101);
    let mut m = Moments::new(1);
    for _ in 0..cfg.draws {
        let e = elbo_estimate(&state, &inst.prior, &inst.arch, &batch, inst.data.len(), &config, &mut rng)?;
        m.push(&[e + cfg.inject_bias]);
    }
    Ok(report(
        "elbo_unbiased",
        m.mean().to_vec(),
        vec![exact],
        m.std_err(),
        start,
        format!("{} draws, quadrature order {}", cfg.draws, cfg.elbo_order),
    ))
}

fn exact_gradient(cfg: &BatteryConfig, inst: &TinyInstance, state: &VariationalState) -> Result<Vec<f64>> {
    let fd_inst = inst.with_order(cfg.fd_order)?;
    let g = finite_diff_grad(|s| exact_elbo(&fd_inst, s, KlMode::Analytic), state, cfg.fd_step)?;
    Ok(g.flatten())
}

fn score_means(
    cfg: &BatteryConfig,
    inst: &TinyInstance,
    state: &VariationalState,
    stream: u64,
    mut baseline: BaselineState,
    bias: f64,
) -> Result<Moments> {
    let batch = inst.data.all();
    let config = full_batch_config(inst.data.len(), Estimator::ScoreFunction, 0.1);
    let mut rng = Stream::with_id(cfg.seed, stream);
    let mut m = Moments::new(3 * state.total_slots());
    for _ in 0..cfg.draws {
        let g = grad_score(state, &inst.prior, &inst.arch, &batch, inst.data.len(), &config, &mut rng, &mut baseline)?;
        let v: Vec<f64> = g.flatten().iter().map(|x| x + bias).collect();
        m.push(&v);
    }
    Ok(m)
}

/// Score-function gradient means against finite differences of the exact ELBO.
pub fn check_grad_score(cfg: &BatteryConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let inst = reference_instance(cfg.elbo_order)?;
    let state = reference_state(&inst.arch)?;
    let expected = exact_gradient(cfg, &inst, &state)?;
    let m = score_means(cfg, &inst, &state, 102, BaselineState::new(0.99), cfg.inject_bias)?;
    Ok(report(
        "grad_score",
        m.mean().to_vec(),
        expected,
        m.std_err(),
        start,
        format!("{} draws, mu/rho/omega, EMA baseline", cfg.draws),
    ))
}

/// Relaxed-estimator gradient means against finite differences of the
/// relaxed ELBO at the same temperature.
pub fn check_grad_relaxed(cfg: &BatteryConfig, delta: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let inst = reference_instance(cfg.elbo_order)?;
    let state = reference_state(&inst.arch)?;
    let design = QmcDesign::new(inst.slots(), cfg.qmc_points, cfg.seed)?;
    let expected = finite_diff_grad(|s| relaxed_elbo_on(&inst, s, delta, &design), &state, cfg.fd_step)?.flatten();
    let batch = inst.data.all();
    let config = full_batch_config(inst.data.len(), Estimator::Relaxed, delta);
    let mut rng = Stream::with_id(cfg.seed, 103 + (delta.to_bits() & 0xffff));
    let mut m = Moments::new(3 * state.total_slots());
    for _ in 0..cfg.draws {
        let g = grad_relaxed(&state, &inst.prior, &inst.arch, &batch, inst.data.len(), &config, &mut rng)?;
        let v: Vec<f64> = g.flatten().iter().map(|x| x + cfg.inject_bias).collect();
        m.push(&v);
    }
    Ok(report(
        &format!("grad_relaxed_delta_{delta}"),
        m.mean().to_vec(),
        expected,
        m.std_err(),
        start,
        format!("{} draws, {} QMC points", cfg.draws, cfg.qmc_points),
    ))
}

/// Score-function gradient means under constant baselines 0 and 100 agree.
pub fn check_baseline_invariance(cfg: &BatteryConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let inst = reference_instance(cfg.elbo_order)?;
    let state = reference_state(&inst.arch)?;
    let zero = score_means(cfg, &inst, &state, 104, BaselineState::fixed(0.0, 1.0), 0.0)?;
    let hundred = score_means(cfg, &inst, &state, 105, BaselineState::fixed(100.0, 1.0), cfg.inject_bias)?;
    let se: Vec<f64> = zero
        .std_err()
        .iter()
        .zip(hundred.std_err())
        .map(|(a, b)| a.hypot(b))
        .collect();
    Ok(report(
        "baseline_invariance",
        hundred.mean().to_vec(),
        zero.mean().to_vec(),
        se,
        start,
        format!("{} draws per baseline, combined standard errors", cfg.draws),
    ))
}

fn random_state(arch: &NetworkArch, rng: &mut Stream) -> Result<VariationalState> {
    let layers = (0..arch.num_layers())
        .map(|l| {
            let shape = arch.layer_shape(l);
            LayerParams {
                mu: Array2::from_shape_simple_fn(shape, || rng.normal()),
                rho: Array2::from_shape_simple_fn(shape, || -3.0 + 4.0 * rng.uniform()),
                omega: Array2::from_shape_simple_fn(shape, || -3.0 + 6.0 * rng.uniform()),
            }
        })
        .collect();
    VariationalState::new(arch, layers)
}

/// Monte-Carlo log ratio against the closed-form KL on random states, plus
/// nonnegativity and the exact zero at the prior.
pub fn check_kl_oracle(cfg: &BatteryConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let arch = NetworkArch::new(vec![2, 3, 2])?;
    let mut rng = Stream::with_id(cfg.seed, 106);
    let (mut observed, mut expected, mut se) = (vec![], vec![], vec![]);
    let mut nonnegative = true;
    for _ in 0..cfg.kl_states {
        let prior = PriorConfig::new(0.05 + 0.9 * rng.uniform(), 0.25 + 2.0 * rng.uniform())?;
        let state = random_state(&arch, &mut rng)?;
        let kl = kl_analytic(&state, &prior);
        nonnegative &= kl >= 0.0;
        let mut m = Moments::new(1);
        for _ in 0..cfg.kl_draws {
            let sample = sample_masked(&state, &mut rng);
            m.push(&[kl_mc_term(&state, &prior, &sample)? + cfg.inject_bias]);
        }
        observed.push(m.mean()[0]);
        expected.push(kl);
        se.push(m.std_err()[0]);
    }
    let sb = std::f64::consts::LN_2;
    let matched = VariationalState::constant(&arch, 0.0, 0.0, 0.0)?;
    let at_prior = kl_analytic(&matched, &PriorConfig::new(0.5, sb * sb)?);
    let mut r = report(
        "kl_oracle",
        observed,
        expected,
        se,
        start,
        format!(
            "{} states x {} draws; closed form nonnegative: {nonnegative}; at prior: {at_prior:e}",
            cfg.kl_states, cfg.kl_draws
        ),
    );
    r.passed &= nonnegative && at_prior == 0.0;
    Ok(r)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// 2-2 instance whose first feature decides the label and whose second
/// feature is uniform noise.
pub fn ordering_instance(seed: u64) -> Result<TinyInstance> {
    let n = 24;
    let mut rng = Stream::with_id(seed, 107);
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        if j == 0 {
            (i as f64 + 0.5) / n as f64
        } else {
            rng.uniform()
        }
    });
    let labels = (0..n).map(|i| usize::from(x[[i, 0]] > 0.5)).collect();
    let data = LabeledDataset::new(x, labels, 2, Provenance::Synthetic)?;
    TinyInstance::new(NetworkArch::new(vec![2, 2])?, data, PriorConfig::new(0.5, 1.0)?, 10)
}

/// After training, learned inclusion probabilities rank like the exact
/// posterior marginals and keep informative slots above noise slots.
pub fn check_alpha_ordering(cfg: &BatteryConfig) -> Result<CheckReport> {
    let start = Instant::now();
    let inst = ordering_instance(cfg.seed)?;
    let exact = exact_marginal_inclusion(&inst)?;
    let mut state = VariationalState::initialize(&inst.arch, &inst.prior, &mut Stream::with_id(cfg.seed, streams::INIT));
    let config = TrainConfig {
        batch_size: inst.data.len(),
        lr_mu: 0.01,
        lr_rho: 0.01,
        lr_omega: 0.05,
        epochs: 4000,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut rng = Stream::with_id(cfg.seed, streams::TRAIN);
    train(&mut state, &inst.prior, &inst.arch, &inst.data, &config, &mut rng, &mut |_| {})?;
    let alpha = state.alpha();
    let a: Vec<f64> = alpha[0].iter().copied().collect();
    let e: Vec<f64> = exact[0].iter().copied().collect();
    let rho = spearman(&a, &e);
    let row_mean = |m: &Array2<f64>, r: usize| m.row(r).mean().unwrap();
    let ordered_vi = row_mean(&alpha[0], 1) > row_mean(&alpha[0], 2);
    let ordered_exact = row_mean(&exact[0], 1) > row_mean(&exact[0], 2);
    let passed = rho > 0.0 && ordered_vi && ordered_exact;
    Ok(CheckReport {
        name: "alpha_ordering".into(),
        passed,
        max_z: 0.0,
        components: a.len(),
        observed: a,
        expected: e,
        std_err: vec![],
        seconds: start.elapsed().as_secs_f64(),
        note: format!(
            "spearman {rho:.3}; informative above noise: learned {ordered_vi}, exact {ordered_exact}"
        ),
    })
}

pub fn run_battery(cfg: &BatteryConfig) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_elbo_unbiased(cfg)?,
        check_grad_score(cfg)?,
        check_grad_relaxed(cfg, 1.0)?,
        check_grad_relaxed(cfg, 0.1)?,
        check_baseline_invariance(cfg)?,
        check_kl_oracle(cfg)?,
        check_alpha_ordering(cfg)?,
    ])
}
