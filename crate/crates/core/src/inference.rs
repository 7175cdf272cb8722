//! Prediction from a trained variational state: Bayesian model averaging over
//! sampled networks, point models (median probability, lambda-threshold,
//! posterior mean), doubt decisions and the uncertainty / sparsity metrics.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MetricsRecord};
use crate::error::{Error, Result};
use crate::model::{
    forward_batch, sample_masked, sample_with_mask, sigmoid, NetworkArch, SlotMask,
    VariationalState,
};
use crate::rng::{streams, Stream};

/// Number of uniform bins in the per-layer inclusion histograms.
pub const HISTOGRAM_BINS: usize = 20;

/// Confidence required before committing to a class.
pub const DEFAULT_DOUBT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// Draw `beta ~ N(mu, sigma^2)` on the selected slots.
    SampleBeta,
    /// Plug in the posterior mean of `beta`.
    ExpectedBeta,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    /// Every slot included; with [`WeightRule::ExpectedBeta`] the weights are `alpha * mu`.
    Full,
    Selected(SlotMask),
}

/// A single fixed structure with a rule for the weights on it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointModel {
    pub structure: Structure,
    pub rule: WeightRule,
}

impl PointModel {
    pub fn with_rule(mut self, rule: WeightRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn mask(&self, state: &VariationalState) -> SlotMask {
        match &self.structure {
            Structure::Full => state
                .shapes()
                .into_iter()
                .map(|s| Array2::from_elem(s, true))
                .collect(),
            Structure::Selected(m) => m.clone(),
        }
    }

    /// Fraction of slots in the structure.
    pub fn density(&self) -> f64 {
        match &self.structure {
            Structure::Full => 1.0,
            Structure::Selected(m) => mask_density(m),
        }
    }

    /// Deterministic weights for [`WeightRule::ExpectedBeta`].
    pub fn expected_weights(&self, state: &VariationalState) -> Vec<Array2<f64>> {
        match &self.structure {
            Structure::Full => state
                .layers()
                .iter()
                .map(|p| &p.alpha() * &p.mu)
                .collect(),
            Structure::Selected(mask) => state
                .layers()
                .iter()
                .zip(mask)
                .map(|(p, m)| {
                    Zip::from(&p.mu)
                        .and(m)
                        .map_collect(|&mu, &on| if on { mu } else { 0.0 })
                })
                .collect(),
        }
    }
}

fn mask_density(mask: &[Array2<bool>]) -> f64 {
    let total: usize = mask.iter().map(Array2::len).sum();
    let on: usize = mask.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    on as f64 / total as f64
}

fn alpha_mask(state: &VariationalState, lambda: f64) -> SlotMask {
    state
        .layers()
        .iter()
        .map(|p| p.omega.mapv(|w| sigmoid(w) > lambda))
        .collect()
}

/// Median probability model: `gamma = I(alpha > 0.5)` (ties excluded).
pub fn median_model(state: &VariationalState) -> PointModel {
    PointModel {
        structure: Structure::Selected(alpha_mask(state, 0.5)),
        rule: WeightRule::ExpectedBeta,
    }
}

/// `gamma = I(alpha > lambda)`.
pub fn threshold_model(state: &VariationalState, lambda: f64) -> Result<PointModel> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold lambda must lie in (0, 1), got {lambda}"
        )));
    }
    Ok(PointModel {
        structure: Structure::Selected(alpha_mask(state, lambda)),
        rule: WeightRule::ExpectedBeta,
    })
}

/// Dense model with weights `alpha * mu`.
pub fn posterior_mean_model(_state: &VariationalState) -> PointModel {
    PointModel {
        structure: Structure::Full,
        rule: WeightRule::ExpectedBeta,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feasibility {
    pub feasible: bool,
    /// First layer without any active non-bias slot.
    pub empty_layer: Option<usize>,
    /// Layer at which no input-connected unit remains reachable.
    pub dead_layer: Option<usize>,
    pub message: String,
}

/// A structure is feasible when some input reaches some output through
/// active non-bias slots at every layer.
pub fn check_feasibility(model: &PointModel, arch: &NetworkArch) -> Feasibility {
    let mask = match &model.structure {
        Structure::Full => {
            return Feasibility {
                feasible: true,
                empty_layer: None,
                dead_layer: None,
                message: "dense structure".into(),
            }
        }
        Structure::Selected(m) => m,
    };
    let empty_layer = mask
        .iter()
        .position(|m| !m.slice(ndarray::s![1.., ..]).iter().any(|&b| b));
    let mut reachable = vec![true; arch.input_dim()];
    let mut dead_layer = None;
    for (l, m) in mask.iter().enumerate() {
        let cols = m.ncols();
        let next: Vec<bool> = (0..cols)
            .map(|j| (0..reachable.len()).any(|k| reachable[k] && m[[k + 1, j]]))
            .collect();
        if !next.iter().any(|&b| b) {
            dead_layer = Some(l);
            break;
        }
        reachable = next;
    }
    let feasible = dead_layer.is_none();
    let message = if feasible {
        "at least one input-to-output path is active".to_string()
    } else if let Some(e) = empty_layer {
        format!("layer {e} has no active non-bias weight; try a lower inclusion threshold (lambda sweep)")
    } else {
        format!(
            "no active path survives layer {}; try a lower inclusion threshold (lambda sweep)",
            dead_layer.unwrap()
        )
    };
    Feasibility {
        feasible,
        empty_layer,
        dead_layer,
        message,
    }
}

/// Outcome of a doubt-aware classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Class(usize),
    Doubt,
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// The argmax class (lowest index on ties) when its probability strictly
/// exceeds `threshold`, otherwise doubt.
pub fn classify_with_doubt(probs: &[f64], threshold: f64) -> Decision {
    let k = argmax(probs);
    if probs[k] > threshold {
        Decision::Class(k)
    } else {
        Decision::Doubt
    }
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub decision: usize,
    pub doubt_decision: Decision,
}

/// Averaged class probabilities for a set of inputs plus the union of slots
/// that were active in at least one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Array2<f64>,
    pub active: SlotMask,
    pub draws: usize,
}

impl Prediction {
    pub fn density(&self) -> f64 {
        mask_density(&self.active)
    }

    pub fn summaries(&self, threshold: f64) -> Vec<PredictiveSummary> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let probs = row.to_vec();
                PredictiveSummary {
                    entropy: entropy(&probs),
                    decision: argmax(&probs),
                    doubt_decision: classify_with_doubt(&probs, threshold),
                    probs,
                }
            })
            .collect()
    }
}

fn check_draws(draws: usize) -> Result<()> {
    if draws == 0 {
        Err(Error::InvalidArgument("number of posterior draws R must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Bayesian model averaging: `R` networks `(gamma, beta) ~ q` are drawn once
/// and every input's class probabilities are averaged over them.
pub fn predict_averaged(
    state: &VariationalState,
    arch: &NetworkArch,
    inputs: ArrayView2<f64>,
    draws: usize,
    rng: &mut Stream,
) -> Result<Prediction> {
    check_draws(draws)?;
    state.check_arch(arch)?;
    let mut probs = Array2::zeros((inputs.nrows(), arch.class_count()));
    let mut active: SlotMask = state
        .shapes()
        .into_iter()
        .map(|s| Array2::from_elem(s, false))
        .collect();
    for _ in 0..draws {
        let sample = sample_masked(state, rng);
        probs += &forward_batch(arch, &sample.weights(), inputs)?;
        for (acc, layer) in active.iter_mut().zip(&sample.layers) {
            Zip::from(acc).and(&layer.gamma).for_each(|a, &g| *a |= g);
        }
    }
    probs /= draws as f64;
    Ok(Prediction {
        probs,
        active,
        draws,
    })
}

/// Union of the slots active in `draws` posterior masks, drawn exactly as
/// [`predict_averaged`] draws them.
pub fn sampled_union(state: &VariationalState, draws: usize, rng: &mut Stream) -> Result<SlotMask> {
    check_draws(draws)?;
    let mut active: SlotMask = state
        .shapes()
        .into_iter()
        .map(|s| Array2::from_elem(s, false))
        .collect();
    for _ in 0..draws {
        let sample = sample_masked(state, rng);
        for (acc, layer) in active.iter_mut().zip(&sample.layers) {
            Zip::from(acc).and(&layer.gamma).for_each(|a, &g| *a |= g);
        }
    }
    Ok(active)
}

/// Predictions of a point model; sampled weights are averaged over `draws`,
/// expected weights need a single deterministic pass.
pub fn predict_point(
    model: &PointModel,
    state: &VariationalState,
    arch: &NetworkArch,
    inputs: ArrayView2<f64>,
    draws: usize,
    rng: &mut Stream,
) -> Result<Prediction> {
    state.check_arch(arch)?;
    let mask = model.mask(state);
    arch.check_layers(&mask, "structure")?;
    match model.rule {
        WeightRule::ExpectedBeta => Ok(Prediction {
            probs: forward_batch(arch, &model.expected_weights(state), inputs)?,
            active: mask,
            draws: 1,
        }),
        WeightRule::SampleBeta => {
            check_draws(draws)?;
            let mut probs = Array2::zeros((inputs.nrows(), arch.class_count()));
            for _ in 0..draws {
                let sample = sample_with_mask(state, &mask, rng);
                probs += &forward_batch(arch, &sample.weights(), inputs)?;
            }
            probs /= draws as f64;
            Ok(Prediction {
                probs,
                active: mask,
                draws,
            })
        }
    }
}

/// Step CDF of the predictive entropies: sorted values paired with `i / n`,
/// one point per distinct value.
pub fn entropy_cdf(summaries: &[PredictiveSummary]) -> Result<Vec<(f64, f64)>> {
    let values: Vec<f64> = summaries.iter().map(|s| s.entropy).collect();
    empirical_cdf(&values)
}

pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("entropy CDF of an empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, e) in sorted.into_iter().enumerate() {
        let point = (e, (i + 1) as f64 / n);
        match cdf.last_mut() {
            Some(last) if last.0 == e => *last = point,
            _ => cdf.push(point),
        }
    }
    Ok(cdf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Mean inclusion probability per layer.
    pub rho_per_layer: Vec<f64>,
    pub density: f64,
    /// Per-layer counts of `alpha` in 20 equal-width bins over `[0, 1]`.
    pub alpha_histograms: Vec<Vec<usize>>,
}

/// Per-layer mean inclusion, `alpha` histograms and the density of `active`
/// (or of the median model when no mask is given).
pub fn sparsity_report(state: &VariationalState, active: Option<&[Array2<bool>]>) -> SparsityReport {
    let alphas = state.alpha();
    let rho_per_layer = alphas.iter().map(|a| a.mean().unwrap_or(0.0)).collect();
    let alpha_histograms = alphas
        .iter()
        .map(|a| {
            let mut bins = vec![0usize; HISTOGRAM_BINS];
            for &v in a {
                let b = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                bins[b] += 1;
            }
            bins
        })
        .collect();
    let density = match active {
        Some(m) => mask_density(m),
        None => median_model(state).density(),
    };
    SparsityReport {
        rho_per_layer,
        density,
        alpha_histograms,
    }
}

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Model averaging over `draws` sampled networks.
    Averaged { draws: usize },
    /// A single posterior draw.
    Single,
    Median { rule: WeightRule, draws: usize },
    Threshold { lambda: f64, rule: WeightRule, draws: usize },
    PosteriorMean,
}

impl EvalMode {
    pub fn label(&self) -> String {
        let rule = |r: &WeightRule| match r {
            WeightRule::SampleBeta => "sample",
            WeightRule::ExpectedBeta => "mean",
        };
        match self {
            EvalMode::Averaged { .. } => "avg".into(),
            EvalMode::Single => "single".into(),
            EvalMode::Median { rule: r, .. } => format!("median-{}", rule(r)),
            EvalMode::Threshold { lambda, rule: r, .. } => format!("threshold-{}-{lambda}", rule(r)),
            EvalMode::PosteriorMean => "postmean".into(),
        }
    }

    fn draws(&self) -> usize {
        match *self {
            EvalMode::Averaged { draws } => draws,
            EvalMode::Single => 1,
            EvalMode::Median { rule, draws } | EvalMode::Threshold { rule, draws, .. } => {
                match rule {
                    WeightRule::SampleBeta => draws,
                    WeightRule::ExpectedBeta => 1,
                }
            }
            EvalMode::PosteriorMean => 1,
        }
    }

    fn is_stochastic(&self) -> bool {
        match self {
            EvalMode::Averaged { .. } | EvalMode::Single => true,
            EvalMode::Median { rule, .. } | EvalMode::Threshold { rule, .. } => {
                *rule == WeightRule::SampleBeta
            }
            EvalMode::PosteriorMean => false,
        }
    }
}

/// Runs the requested prediction protocol over a labelled dataset.
pub fn predict_dataset(
    state: &VariationalState,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    mode: EvalMode,
    seed: u64,
) -> Result<Prediction> {
    let mut rng = Stream::with_id(seed, streams::PREDICT);
    let inputs = dataset.features().view();
    match mode {
        EvalMode::Averaged { draws } => predict_averaged(state, arch, inputs, draws, &mut rng),
        EvalMode::Single => predict_averaged(state, arch, inputs, 1, &mut rng),
        EvalMode::Median { rule, draws } => {
            let model = median_model(state).with_rule(rule);
            let report = check_feasibility(&model, arch);
            if !report.feasible {
                return Err(Error::Infeasible(report.message));
            }
            predict_point(&model, state, arch, inputs, draws, &mut rng)
        }
        EvalMode::Threshold { lambda, rule, draws } => {
            let model = threshold_model(state, lambda)?.with_rule(rule);
            predict_point(&model, state, arch, inputs, draws, &mut rng)
        }
        EvalMode::PosteriorMean => {
            predict_point(&posterior_mean_model(state), state, arch, inputs, 1, &mut rng)
        }
    }
}

/// Accuracy over all examples, accuracy on the confidently classified
/// subset, density of the used structure and per-layer mean inclusion.
pub fn evaluate(
    state: &VariationalState,
    arch: &NetworkArch,
    dataset: &LabeledDataset,
    mode: EvalMode,
    doubt_threshold: f64,
    seed: u64,
) -> Result<MetricsRecord> {
    if !(0.0..1.0).contains(&doubt_threshold) {
        return Err(Error::InvalidArgument(format!(
            "doubt threshold must lie in [0, 1), got {doubt_threshold}"
        )));
    }
    if dataset.class_count() != arch.class_count() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, architecture {}",
            dataset.class_count(),
            arch.class_count()
        )));
    }
    let prediction = predict_dataset(state, arch, dataset, mode, seed)?;
    let summaries = prediction.summaries(doubt_threshold);
    let labels = dataset.labels();
    let correct = summaries
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.decision == y)
        .count();
    let (classified, classified_correct) =
        summaries
            .iter()
            .zip(labels)
            .fold((0usize, 0usize), |(n, c), (s, &y)| match s.doubt_decision {
                Decision::Class(k) => (n + 1, c + usize::from(k == y)),
                Decision::Doubt => (n, c),
            });
    let rho_per_layer = state
        .alpha()
        .iter()
        .map(|a| a.mean().unwrap_or(0.0))
        .collect();
    Ok(MetricsRecord {
        mode: mode.label(),
        r: mode.draws(),
        accuracy_all: correct as f64 / labels.len() as f64,
        accuracy_doubt: (classified > 0).then(|| classified_correct as f64 / classified as f64),
        num_classified: classified,
        density: prediction.density(),
        rho_per_layer,
        seed: mode.is_stochastic().then_some(seed),
    })
}

/// Mean predictive entropy over a prediction's rows.
pub fn mean_entropy(prediction: &Prediction) -> f64 {
    let n = prediction.probs.nrows() as f64;
    prediction
        .probs
        .axis_iter(Axis(0))
        .map(|row| entropy(&row.to_vec()))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::model::{forward, logit, LayerParams, PriorConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn state_from_alpha(arch: &NetworkArch, alphas: &[f64]) -> VariationalState {
        let mut it = alphas.iter().cycle();
        let layers = (0..arch.num_layers())
            .map(|l| {
                let shape = arch.layer_shape(l);
                LayerParams {
                    mu: Array2::from_elem(shape, 1.0),
                    rho: Array2::from_elem(shape, -2.0),
                    omega: Array2::from_shape_simple_fn(shape, || logit(*it.next().unwrap())),
                }
            })
            .collect();
        VariationalState::new(arch, layers).unwrap()
    }

    #[test]
    fn median_threshold_examples() {
        let arch = NetworkArch::new(vec![1, 1]).unwrap(); // 2 slots
        let s = state_from_alpha(&arch, &[0.6, 0.4]);
        let Structure::Selected(m) = median_model(&s).structure else { panic!() };
        assert_eq!(m[0], array![[true], [false]]);

        let s = VariationalState::constant(&arch, 0.0, 0.0, 0.0).unwrap(); // alpha = 0.5 exactly
        assert_eq!(median_model(&s).density(), 0.0);
        assert_eq!(threshold_model(&s, 0.5).unwrap(), median_model(&s));
        assert_eq!(threshold_model(&s, 1e-12).unwrap().density(), 1.0);
        assert!(threshold_model(&s, 0.0).is_err());
        assert!(threshold_model(&s, 1.0).is_err());
    }

    #[test]
    fn posterior_mean_weights() {
        let arch = NetworkArch::new(vec![1, 2]).unwrap();
        let mut s = VariationalState::constant(&arch, 2.0, 0.0, logit(0.25)).unwrap();
        let w = posterior_mean_model(&s).expected_weights(&s);
        assert_abs_diff_eq!(w[0][[0, 0]], 0.5, epsilon = 1e-15);
        s.layers_mut()[0].omega.fill(1e9);
        let w = posterior_mean_model(&s).expected_weights(&s);
        assert_eq!(w[0], s.layers()[0].mu);
        s.layers_mut()[0].omega.fill(-1e9);
        let w = posterior_mean_model(&s).expected_weights(&s);
        let p = forward(&arch, &w, &[0.7]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn feasibility_fixtures() {
        let arch = NetworkArch::new(vec![2, 2, 2]).unwrap();
        let full = PointModel {
            structure: Structure::Selected(vec![Array2::from_elem((3, 2), true); 2]),
            rule: WeightRule::ExpectedBeta,
        };
        assert!(check_feasibility(&full, &arch).feasible);

        let mut zeroed = vec![Array2::from_elem((3, 2), true); 2];
        zeroed[1].fill(false);
        let r = check_feasibility(
            &PointModel { structure: Structure::Selected(zeroed), rule: WeightRule::ExpectedBeta },
            &arch,
        );
        assert!(!r.feasible);
        assert_eq!(r.empty_layer, Some(1));
        assert!(r.message.contains("layer 1"));

        // layer 0 feeds only hidden unit 0; layer 1 reads only hidden unit 1
        let mut l0 = Array2::from_elem((3, 2), false);
        l0[[1, 0]] = true;
        l0[[2, 0]] = true;
        let mut l1 = Array2::from_elem((3, 2), false);
        l1[[2, 0]] = true;
        l1[[2, 1]] = true;
        let r = check_feasibility(
            &PointModel { structure: Structure::Selected(vec![l0, l1]), rule: WeightRule::ExpectedBeta },
            &arch,
        );
        assert!(!r.feasible);
        assert_eq!(r.empty_layer, None);
        assert_eq!(r.dead_layer, Some(1));
    }

    #[test]
    fn doubt_and_entropy() {
        let mut p = vec![0.03 / 9.0; 10];
        p[3] = 0.97;
        assert_eq!(classify_with_doubt(&p, 0.95), Decision::Class(3));
        let mut q = vec![0.2 / 9.0; 10];
        q[1] = 0.8;
        assert_eq!(classify_with_doubt(&q, 0.95), Decision::Doubt);
        assert_eq!(classify_with_doubt(&[0.95, 0.05], 0.95), Decision::Doubt);
        assert_eq!(classify_with_doubt(&[0.5, 0.5], 0.4), Decision::Class(0));

        let mut onehot = vec![0.0; 10];
        onehot[2] = 1.0;
        assert_eq!(entropy(&onehot), 0.0);
        assert_abs_diff_eq!(entropy(&[0.1; 10]), std::f64::consts::LN_10, epsilon = 1e-12);
        let mut half = vec![0.0; 10];
        half[0] = 0.5;
        half[1] = 0.5;
        assert_abs_diff_eq!(entropy(&half), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(empirical_cdf(&[0.7]).unwrap(), vec![(0.7, 1.0)]);
        let ln10 = std::f64::consts::LN_10;
        assert_eq!(empirical_cdf(&[ln10, 0.0]).unwrap(), vec![(0.0, 0.5), (ln10, 1.0)]);
        assert!(empirical_cdf(&[]).is_err());
        let cdf = empirical_cdf(&[0.3, 0.1, 0.9, 0.1, 0.5]).unwrap();
        assert_eq!(cdf, vec![(0.1, 0.4), (0.3, 0.6), (0.5, 0.8), (0.9, 1.0)]);
        assert_eq!(empirical_cdf(&[ln10; 4]).unwrap(), vec![(ln10, 1.0)]);
    }

    #[test]
    fn deterministic_posterior_ignores_draw_count() {
        let arch = NetworkArch::new(vec![3, 4, 3]).unwrap();
        let prior = PriorConfig::new(0.5, 1.0).unwrap();
        let mut s = VariationalState::initialize(&arch, &prior, &mut Stream::new(1));
        for p in s.layers_mut() {
            p.omega.fill(1e9);
            p.rho.fill(-1e9);
        }
        let x = array![[0.1, 0.5, 0.9], [1.0, 0.0, 0.3]];
        let w: Vec<_> = s.layers().iter().map(|p| p.mu.clone()).collect();
        let single = forward_batch(&arch, &w, x.view()).unwrap();
        for r in [1, 7] {
            let p = predict_averaged(&s, &arch, x.view(), r, &mut Stream::new(3)).unwrap();
            for (a, b) in p.probs.iter().zip(single.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
        assert!(predict_averaged(&s, &arch, x.view(), 0, &mut Stream::new(3)).is_err());
    }

    #[test]
    fn single_draw_equals_sample_then_forward() {
        let arch = NetworkArch::new(vec![3, 4, 3]).unwrap();
        let prior = PriorConfig::new(0.4, 1.0).unwrap();
        let s = VariationalState::initialize(&arch, &prior, &mut Stream::new(1));
        let x = array![[0.1, 0.5, 0.9]];
        let p = predict_averaged(&s, &arch, x.view(), 1, &mut Stream::new(8)).unwrap();
        let sample = sample_masked(&s, &mut Stream::new(8));
        let direct = forward_batch(&arch, &sample.weights(), x.view()).unwrap();
        assert_eq!(p.probs, direct);
    }

    #[test]
    fn density_grows_with_draws() {
        let arch = NetworkArch::new(vec![5, 6, 3]).unwrap();
        let prior = PriorConfig::new(0.2, 1.0).unwrap();
        let s = VariationalState::initialize(&arch, &prior, &mut Stream::new(1));
        let x = Array2::from_elem((2, 5), 0.5);
        let d1 = predict_averaged(&s, &arch, x.view(), 1, &mut Stream::new(2)).unwrap().density();
        let d10 = predict_averaged(&s, &arch, x.view(), 10, &mut Stream::new(2)).unwrap().density();
        assert!(d10 >= d1);
    }

    #[test]
    fn sparsity_examples() {
        let arch = NetworkArch::new(vec![3, 2, 2]).unwrap();
        let s = VariationalState::constant(&arch, 0.0, 0.0, logit(0.2)).unwrap();
        let rep = sparsity_report(&s, None);
        for r in &rep.rho_per_layer {
            assert_abs_diff_eq!(*r, 0.2, epsilon = 1e-12);
        }
        for (l, h) in rep.alpha_histograms.iter().enumerate() {
            assert_eq!(h.iter().sum::<usize>(), arch.layer_slots(l));
            assert_eq!(h.len(), HISTOGRAM_BINS);
        }
        assert_eq!(rep.density, 0.0);
    }

    #[test]
    fn perfect_classifier_metrics() {
        let arch = NetworkArch::new(vec![1, 2]).unwrap();
        let layers = vec![LayerParams {
            mu: array![[5.0, -5.0], [-10.0, 10.0]],
            rho: Array2::from_elem((2, 2), -1e9),
            omega: Array2::from_elem((2, 2), 1e9),
        }];
        let s = VariationalState::new(&arch, layers).unwrap();
        let data = LabeledDataset::new(array![[0.0], [1.0]], vec![0, 1], 2, Provenance::Synthetic).unwrap();
        let rec = evaluate(&s, &arch, &data, EvalMode::Averaged { draws: 3 }, 0.0, 1).unwrap();
        assert_eq!(rec.accuracy_all, 1.0);
        assert_eq!(rec.num_classified, 2);
        assert_eq!(rec.accuracy_doubt, Some(1.0));
        let again = evaluate(&s, &arch, &data, EvalMode::Averaged { draws: 3 }, 0.0, 1).unwrap();
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        let pm = evaluate(&s, &arch, &data, EvalMode::PosteriorMean, 0.95, 1).unwrap();
        assert_eq!(pm.seed, None);
    }
}
