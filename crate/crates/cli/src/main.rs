use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ssbnn::data::{load_checkpoint, load_idx, save_checkpoint, write_metrics, Checkpoint, LabeledDataset, CHECKPOINT_VERSION};
use ssbnn::inference::{
    empirical_cdf, entropy, evaluate, median_model, predict_averaged, sampled_union, sparsity_report,
    threshold_model, EvalMode, WeightRule, DEFAULT_DOUBT_THRESHOLD,
};
use ssbnn::model::{NetworkArch, PriorConfig, VariationalState};
use ssbnn::oracle::checks::{run_battery, BatteryConfig};
use ssbnn::rng::{streams, Stream};
use ssbnn::vi::{post_train, train, Estimator, PostTrainMode, TrainConfig};
use ssbnn::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ORACLE: u8 = 4;

/// Spike-and-slab variational Bayesian neural networks.
#[derive(Parser, Debug)]
#[command(name = "ssbnn", version)]
struct RunSpec {
    /// Worker threads for matrix products and oracle quadrature.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a variational state from scratch and write a checkpoint.
    Train(TrainArgs),
    /// Continue training the slabs with inclusion logits frozen.
    Posttrain(PosttrainArgs),
    /// Evaluate a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Per-layer inclusion statistics and density.
    Sparsity(SparsityArgs),
    /// Predictive-entropy CDFs on in-domain and out-of-domain data.
    Ood(OodArgs),
    /// Run the exact-oracle validation battery.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// IDX image file (relative paths resolve against SSBNN_DATA_DIR).
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Use only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct OptimArgs {
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_mu: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_rho: f64,
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also append the per-epoch JSON lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EstimatorArg {
    Relaxed,
    #[value(alias = "score-function")]
    Score,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Comma-separated layer widths, input first.
    #[arg(long)]
    arch: NetworkArch,
    #[arg(long)]
    psi: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_beta_sq: f64,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_omega: f64,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Relaxed)]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.99)]
    baseline_decay: f64,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PostMode {
    Sampled,
    Median,
}

#[derive(Args, Debug)]
struct PosttrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PostMode::Sampled)]
    mode: PostMode,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum ModeArg {
    Avg,
    Single,
    Median,
    Threshold,
    Postmean,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum RuleArg {
    Sample,
    Mean,
}

#[derive(Args, Debug)]
struct ModeArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Avg)]
    mode: ModeArg,
    /// Weight rule for median / threshold models.
    #[arg(long, value_enum, default_value_t = RuleArg::Mean)]
    rule: RuleArg,
    /// Posterior draws for averaged or sampled-weight predictions.
    #[arg(long = "R", default_value_t = 10)]
    draws: usize,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
    #[arg(long, default_value_t = DEFAULT_DOUBT_THRESHOLD)]
    doubt_threshold: f64,
    #[command(flatten)]
    data: DataArgs,
    /// Append the metrics record to this JSON-lines file.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SparsityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args, Debug)]
struct OodArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    ood_images: PathBuf,
    #[arg(long)]
    ood_labels: PathBuf,
    #[arg(long = "R", default_value_t = 10)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write both series to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    /// Add a constant to every stochastic estimate (harness self-test).
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0", default_value_t = 0.0)]
    inject_bias: f64,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Oracle(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::NumericalFailure { .. } | Error::Infeasible(_) | Error::Inconsistent(_) | Error::Capacity(_) => {
            EXIT_NUMERIC
        }
        _ => EXIT_DATA,
    }
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os("SSBNN_DATA_DIR") {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_data(images: &Path, labels: &Path, limit: Option<usize>, arch: &NetworkArch) -> Result<LabeledDataset, Failure> {
    let data = load_idx(resolve(images), resolve(labels))?;
    let data = match limit {
        Some(0) => return Err(usage("--limit must be at least 1")),
        Some(n) => data.head(n),
        None => data,
    };
    if data.dim() != arch.input_dim() {
        return Err(Failure::Lib(Error::Shape(format!(
            "dataset has {} features, architecture {arch} expects {}",
            data.dim(),
            arch.input_dim()
        ))));
    }
    Ok(data.with_class_count(arch.class_count())?)
}

fn check_unit_open(name: &str, v: f64) -> CmdResult {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--{name} must lie in (0, 1), got {v}")))
    }
}

fn eval_mode(args: &ModeArgs) -> Result<EvalMode, Failure> {
    if args.draws == 0 {
        return Err(usage("--R must be at least 1"));
    }
    let rule = match args.rule {
        RuleArg::Sample => WeightRule::SampleBeta,
        RuleArg::Mean => WeightRule::ExpectedBeta,
    };
    Ok(match args.mode {
        ModeArg::Avg => EvalMode::Averaged { draws: args.draws },
        ModeArg::Single => EvalMode::Single,
        ModeArg::Median => EvalMode::Median { rule, draws: args.draws },
        ModeArg::Threshold => {
            let lambda = args.lambda.ok_or_else(|| usage("--mode threshold needs --lambda"))?;
            check_unit_open("lambda", lambda)?;
            EvalMode::Threshold { lambda, rule, draws: args.draws }
        }
        ModeArg::Postmean => EvalMode::PosteriorMean,
    })
}

struct EpochLog {
    file: Option<PathBuf>,
    start: Instant,
    offset: usize,
}

impl EpochLog {
    fn emit(&self, epoch: usize, steps: usize, elbo: f64) {
        let line = json!({
            "epoch": self.offset + epoch + 1,
            "steps": steps,
            "elbo": elbo,
            "wall_time_s": self.start.elapsed().as_secs_f64(),
        })
        .to_string();
        println!("{line}");
        if let Some(path) = &self.file {
            use std::io::Write;
            let appended = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = appended {
                eprintln!("warning: cannot write {}: {e}", path.display());
            }
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let prior = PriorConfig::new(a.psi, a.sigma_beta_sq)?;
    let config = TrainConfig {
        batch_size: a.optim.batch,
        mc_samples: a.optim.mc_samples,
        lr_mu: a.optim.lr_mu,
        lr_rho: a.optim.lr_rho,
        lr_omega: a.lr_omega,
        epochs: a.epochs,
        estimator: match a.estimator {
            EstimatorArg::Relaxed => Estimator::Relaxed,
            EstimatorArg::Score => Estimator::ScoreFunction,
        },
        delta: a.delta,
        baseline_decay: a.baseline_decay,
        seed: a.optim.seed,
        ..TrainConfig::default()
    };
    config.validate(usize::MAX)?;
    let epochs = u32::try_from(a.epochs).map_err(|_| usage("--epochs too large"))?;
    let data = load_data(&a.data.images, &a.data.labels, a.data.limit, &a.arch)?;
    config.validate(data.len())?;
    let mut state = VariationalState::initialize(&a.arch, &prior, &mut Stream::with_id(config.seed, streams::INIT));
    let log = EpochLog {
        file: a.optim.log.clone(),
        start: Instant::now(),
        offset: 0,
    };
    let mut rng = Stream::with_id(config.seed, streams::TRAIN);
    train(&mut state, &prior, &a.arch, &data, &config, &mut rng, &mut |d| {
        log.emit(d.epoch, d.steps, d.mean_elbo)
    })?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        arch: a.arch.clone(),
        prior,
        state,
        seed: config.seed as i64,
        epochs,
        estimator: config.estimator,
        delta: config.delta,
    };
    save_checkpoint(&ckpt, &a.out)?;
    Ok(())
}

fn cmd_posttrain(a: &PosttrainArgs) -> CmdResult {
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    let config = TrainConfig {
        batch_size: a.optim.batch,
        mc_samples: a.optim.mc_samples,
        lr_mu: a.optim.lr_mu,
        lr_rho: a.optim.lr_rho,
        lr_omega: 0.0,
        epochs: a.epochs,
        estimator: ckpt.estimator,
        delta: ckpt.delta,
        seed: a.optim.seed,
        ..TrainConfig::default()
    };
    config.validate(usize::MAX)?;
    let extra = u32::try_from(a.epochs).map_err(|_| usage("--epochs too large"))?;
    let data = load_data(&a.data.images, &a.data.labels, a.data.limit, &ckpt.arch)?;
    config.validate(data.len())?;
    let mode = match a.mode {
        PostMode::Sampled => PostTrainMode::SampledGamma,
        PostMode::Median => PostTrainMode::MedianModel,
    };
    let log = EpochLog {
        file: a.optim.log.clone(),
        start: Instant::now(),
        offset: ckpt.epochs as usize,
    };
    let mut rng = Stream::with_id(config.seed, streams::POSTTRAIN);
    post_train(&mut ckpt.state, mode, &ckpt.prior, &ckpt.arch, &data, &config, &mut rng, &mut |d| {
        log.emit(d.epoch, d.steps, d.mean_elbo)
    })?;
    ckpt.epochs = ckpt.epochs.saturating_add(extra);
    save_checkpoint(&ckpt, &a.out)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let mode = eval_mode(&a.mode)?;
    if !(0.0..1.0).contains(&a.doubt_threshold) {
        return Err(usage(format!("--doubt-threshold must lie in [0, 1), got {}", a.doubt_threshold)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data.images, &a.data.labels, a.data.limit, &ckpt.arch)?;
    let record = evaluate(&ckpt.state, &ckpt.arch, &data, mode, a.doubt_threshold, a.mode.seed)?;
    println!("{}", record.to_json_line()?);
    if let Some(path) = &a.metrics_out {
        write_metrics(&record, path)?;
    }
    Ok(())
}

fn cmd_sparsity(a: &SparsityArgs) -> CmdResult {
    let mode = eval_mode(&a.mode)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let state = &ckpt.state;
    let mut rng = Stream::with_id(a.mode.seed, streams::PREDICT);
    let mask = match mode {
        EvalMode::Averaged { draws } => Some(sampled_union(state, draws, &mut rng)?),
        EvalMode::Single => Some(sampled_union(state, 1, &mut rng)?),
        EvalMode::Median { .. } => Some(median_model(state).mask(state)),
        EvalMode::Threshold { lambda, .. } => Some(threshold_model(state, lambda)?.mask(state)),
        EvalMode::PosteriorMean => None,
    };
    let mut report = sparsity_report(state, mask.as_deref());
    if mask.is_none() {
        report.density = 1.0;
    }
    let line = json!({
        "mode": mode.label(),
        "rho_per_layer": report.rho_per_layer,
        "density": report.density,
        "alpha_histograms": report.alpha_histograms,
        "histogram_bins": ssbnn::inference::HISTOGRAM_BINS,
    });
    println!("{line}");
    Ok(())
}

fn cmd_ood(a: &OodArgs) -> CmdResult {
    if a.draws == 0 {
        return Err(usage("--R must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut lines = Vec::new();
    for (series, images, labels) in [
        ("in_domain", &a.data.images, &a.data.labels),
        ("out_of_domain", &a.ood_images, &a.ood_labels),
    ] {
        let data = load_data(images, labels, a.data.limit, &ckpt.arch)?;
        let mut rng = Stream::with_id(a.seed, streams::PREDICT);
        let pred = predict_averaged(&ckpt.state, &ckpt.arch, data.features().view(), a.draws, &mut rng)?;
        let entropies: Vec<f64> = pred.probs.rows().into_iter().map(|r| entropy(&r.to_vec())).collect();
        let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
        let cdf = empirical_cdf(&entropies)?;
        lines.push(
            json!({
                "series": series,
                "unit": "nats",
                "R": a.draws,
                "n": entropies.len(),
                "mean_entropy": mean,
                "cdf": cdf,
            })
            .to_string(),
        );
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(path) = &a.out {
        std::fs::write(path, &text).map_err(|e| Failure::Lib(Error::Io { path: path.clone(), source: e }))?;
    }
    Ok(())
}

fn cmd_oracle_check(a: &OracleArgs) -> CmdResult {
    if a.draws < 2 {
        return Err(usage("--draws must be at least 2"));
    }
    let mut cfg = BatteryConfig {
        draws: a.draws,
        inject_bias: a.inject_bias,
        ..BatteryConfig::default()
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let start = Instant::now();
    let reports = run_battery(&cfg)?;
    let mut failed = 0;
    for r in &reports {
        failed += usize::from(!r.passed);
        println!("{}", serde_json::to_string(r).expect("report serializes"));
        eprintln!(
            "{} {:<24} max |z| = {:.3} over {} components ({:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_z,
            r.components,
            r.seconds
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed > 600.0 {
        eprintln!("warning: oracle battery took {elapsed:.0}s, above the 10 minute budget");
    }
    if failed > 0 {
        Err(Failure::Oracle(failed))
    } else {
        Ok(())
    }
}

fn configure_threads(threads: usize) -> CmdResult {
    if threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    // Read once by the matrix-product kernels on first use.
    std::env::set_var("MATMUL_NUM_THREADS", threads.to_string());
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| usage(format!("cannot size thread pool: {e}")))
}

fn run(spec: &RunSpec) -> CmdResult {
    configure_threads(spec.threads)?;
    match &spec.command {
        Command::Train(a) => cmd_train(a),
        Command::Posttrain(a) => cmd_posttrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sparsity(a) => cmd_sparsity(a),
        Command::Ood(a) => cmd_ood(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    }
}

fn main() -> ExitCode {
    let spec = match RunSpec::try_parse() {
        Ok(s) => s,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&spec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Oracle(n)) => {
            eprintln!("error: {n} oracle check(s) failed");
            ExitCode::from(EXIT_ORACLE)
        }
    }
}
