//! End-to-end acceptance gate. Every criterion is evaluated, one PASS/FAIL
//! line is printed for each, and the test fails if any criterion fails.
//!
//! Criteria 6-8 need the MNIST and Fashion-MNIST IDX files under `data/`
//! (see `scripts/fetch_datasets.sh`).

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use ssbnn::data::{
    load_checkpoint, load_idx, read_metrics, save_checkpoint, write_metrics, Checkpoint, MetricsRecord,
    CHECKPOINT_VERSION,
};
use ssbnn::inference::{check_feasibility, median_model, threshold_model, PointModel, Structure, WeightRule};
use ssbnn::model::{LayerParams, NetworkArch, PriorConfig, VariationalState};
use ssbnn::oracle::checks::{
    check_baseline_invariance, check_elbo_unbiased, check_grad_relaxed, check_grad_score, check_kl_oracle,
    BatteryConfig, CheckReport,
};
use ssbnn::oracle::factorized_argmax;
use ssbnn::rng::Stream;
use ssbnn::vi::Estimator;

const PSI: f64 = 0.1353352832366127; // exp(-2)
const SEED: &str = "1";

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, passed: bool, detail: impl Into<String>) -> Outcome {
    let o = Outcome {
        id,
        passed,
        detail: detail.into(),
    };
    println!("criterion {:<3} {}  {}", o.id, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    o
}

fn oracle(id: &'static str, budget_s: f64, reports: &[CheckReport]) -> Outcome {
    let seconds: f64 = reports.iter().map(|r| r.seconds).sum();
    let passed = reports.iter().all(|r| r.passed) && seconds < budget_s;
    let detail = reports
        .iter()
        .map(|r| format!("{}: max|z|={:.2} over {}", r.name, r.max_z, r.components))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(id, passed, format!("{detail}; {seconds:.1}s of {budget_s}s"))
}

fn criterion_1(cfg: &BatteryConfig) -> Outcome {
    oracle("1", 60.0, &[check_elbo_unbiased(cfg).unwrap()])
}

fn criterion_2(cfg: &BatteryConfig) -> Outcome {
    oracle("2", 120.0, &[check_grad_score(cfg).unwrap()])
}

fn criterion_3(cfg: &BatteryConfig) -> Outcome {
    oracle(
        "3",
        180.0,
        &[check_grad_relaxed(cfg, 1.0).unwrap(), check_grad_relaxed(cfg, 0.1).unwrap()],
    )
}

fn criterion_4(cfg: &BatteryConfig) -> Outcome {
    oracle("4", 120.0, &[check_baseline_invariance(cfg).unwrap()])
}

fn criterion_5(cfg: &BatteryConfig) -> Outcome {
    let r = check_kl_oracle(cfg).unwrap();
    let note = r.note.clone();
    let o = oracle("5", 60.0, &[r]);
    Outcome {
        detail: format!("{} ({note})", o.detail),
        ..o
    }
}

fn random_state(arch: &NetworkArch, rng: &mut Stream) -> VariationalState {
    let layers = (0..arch.num_layers())
        .map(|l| {
            let shape = arch.layer_shape(l);
            LayerParams {
                mu: Array2::from_shape_simple_fn(shape, || rng.normal()),
                rho: Array2::from_shape_simple_fn(shape, || rng.normal()),
                omega: Array2::from_shape_simple_fn(shape, || 3.0 * rng.normal()),
            }
        })
        .collect();
    VariationalState::new(arch, layers).unwrap()
}

fn selected(mask: Vec<Array2<bool>>) -> PointModel {
    PointModel {
        structure: Structure::Selected(mask),
        rule: WeightRule::ExpectedBeta,
    }
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(9);

    let small = NetworkArch::new(vec![2, 1, 2]).unwrap(); // 3 + 4 = 7 slots
    let wide = NetworkArch::new(vec![1, 2, 2]).unwrap(); // 4 + 6 = 10 slots
    let mut argmax_agree = 0;
    let trials = 50;
    for i in 0..trials {
        let arch = if i % 2 == 0 { &small } else { &wide };
        let state = random_state(arch, &mut rng);
        if median_model(&state).mask(&state) == factorized_argmax(&state).unwrap() {
            argmax_agree += 1;
        }
    }

    let big = NetworkArch::new(vec![6, 5, 3]).unwrap();
    let state = random_state(&big, &mut rng);
    let densities: Vec<f64> = (1..100)
        .map(|k| threshold_model(&state, k as f64 / 100.0).unwrap().density())
        .collect();
    let monotone = densities.windows(2).all(|w| w[1] <= w[0]);

    let arch = NetworkArch::new(vec![2, 2, 2]).unwrap();
    let ones = |r, c| Array2::from_elem((r, c), true);
    let all_on = selected(vec![ones(3, 2), ones(3, 2)]);
    let mut hidden_off = ones(3, 2);
    hidden_off.slice_mut(ndarray::s![1.., ..]).fill(false);
    let zeroed = selected(vec![ones(3, 2), hidden_off]);
    let mut l0 = Array2::from_elem((3, 2), false);
    l0[[1, 0]] = true; // input 0 -> hidden 0
    l0[[2, 0]] = true; // input 1 -> hidden 0
    let mut l1 = Array2::from_elem((3, 2), false);
    l1[[2, 0]] = true; // hidden 1 -> output 0
    l1[[2, 1]] = true;
    let disconnected = selected(vec![l0, l1]);
    let f_on = check_feasibility(&all_on, &arch);
    let f_zeroed = check_feasibility(&zeroed, &arch);
    let f_disc = check_feasibility(&disconnected, &arch);
    let feasibility_ok = f_on.feasible && !f_zeroed.feasible && f_zeroed.empty_layer == Some(1) && !f_disc.feasible;

    let seconds = start.elapsed().as_secs_f64();
    outcome(
        "9",
        argmax_agree == trials && monotone && feasibility_ok && seconds < 60.0,
        format!(
            "median = argmax on {argmax_agree}/{trials} states; threshold density monotone over 99 lambdas: {monotone}; \
             fixtures feasible/zeroed/disconnected = {}/{}/{}; {seconds:.1}s of 60s",
            f_on.feasible, f_zeroed.feasible, f_disc.feasible
        ),
    )
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();

    let arch = NetworkArch::new(vec![3, 4, 2]).unwrap();
    let state = random_state(&arch, &mut Stream::new(10));
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        arch: arch.clone(),
        prior: PriorConfig::new(PSI, 1.0).unwrap(),
        state,
        seed: -17,
        epochs: 3,
        estimator: Estimator::ScoreFunction,
        delta: 0.1,
    };
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let bits = |c: &Checkpoint| -> Vec<u64> {
        c.state
            .layers()
            .iter()
            .flat_map(|p| p.mu.iter().chain(&p.rho).chain(&p.omega).map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let ckpt_ok = bits(&back) == bits(&ckpt) && back.to_bytes() == ckpt.to_bytes() && back == ckpt;

    // Values printed by scripts/make_idx_fixture.py.
    let expected: [[f64; 4]; 2] = [
        [0.0, 1.0, 0.5019607843137255, 0.0],
        [0.06666666666666667, 0.13333333333333333, 0.7843137254901961, 0.011764705882352941],
    ];
    let idx_ok = match load_idx(fixture("tiny-images-idx3-ubyte"), fixture("tiny-labels-idx1-ubyte")) {
        Ok(d) => {
            d.labels() == [7, 2]
                && d.features().rows().into_iter().zip(&expected).all(|(row, want)| {
                    row.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits())
                })
        }
        Err(_) => false,
    };

    let record = MetricsRecord {
        mode: "avg".into(),
        r: 10,
        accuracy_all: 0.9123456789012345,
        accuracy_doubt: Some(0.1 + 0.2),
        num_classified: 4321,
        density: std::f64::consts::PI / 7.0,
        rho_per_layer: vec![1.0 / 3.0, 5e-324, 0.9999999999999999],
        seed: Some(u64::MAX),
    };
    let mpath = dir.path().join("m.jsonl");
    write_metrics(&record, &mpath).unwrap();
    write_metrics(&record, &mpath).unwrap();
    let metrics_ok = read_metrics(&mpath).unwrap() == vec![record.clone(), record];

    outcome(
        "10",
        ckpt_ok && idx_ok && metrics_ok,
        format!("checkpoint bit-identical: {ckpt_ok}; IDX fixture exact: {idx_ok}; metrics round-trip: {metrics_ok}"),
    )
}

struct Pipeline {
    dir: tempfile::TempDir,
    records: Vec<MetricsRecord>,
    posttrain_error: Option<String>,
    ood_means: Option<(f64, f64)>,
    train_seconds: f64,
    ood_seconds: f64,
}

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn ssbnn(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ssbnn"))
        .args(args)
        .env("SSBNN_DATA_DIR", data_root())
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`ssbnn {}` exited with {}: {}",
            args.first().unwrap_or(&""),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn run_pipeline() -> Result<Pipeline, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (trained, post, metrics, ood) = (p("train.ckpt"), p("post.ckpt"), p("metrics.jsonl"), p("ood.jsonl"));
    let train_data = [
        "--images",
        "mnist/train-images-idx3-ubyte",
        "--labels",
        "mnist/train-labels-idx1-ubyte",
        "--limit",
        "10000",
    ];
    let test_data = ["--images", "mnist/t10k-images-idx3-ubyte", "--labels", "mnist/t10k-labels-idx1-ubyte"];

    let start = Instant::now();
    let psi = PSI.to_string();
    let mut args = vec![
        "train", "--arch", "784,128,10", "--psi", &psi, "--sigma-beta-sq", "1", "--batch", "100", "--lr-mu",
        "0.0001", "--lr-rho", "0.0001", "--lr-omega", "0.1", "--epochs", "10", "--seed", SEED, "--out", &trained,
    ];
    args.extend(train_data);
    ssbnn(&args)?;

    for mode in [["--mode", "avg", "--R", "10"], ["--mode", "avg", "--R", "1"]] {
        let mut args = vec!["eval", "--checkpoint", &trained, "--metrics-out", &metrics, "--seed", SEED];
        args.extend(mode);
        args.extend(test_data);
        ssbnn(&args)?;
    }

    let mut args = vec![
        "posttrain", "--checkpoint", &trained, "--mode", "median", "--epochs", "5", "--lr-mu", "0.0001",
        "--lr-rho", "0.0001", "--seed", SEED, "--out", &post,
    ];
    args.extend(train_data);
    let posttrain_error = match ssbnn(&args) {
        Ok(_) => {
            let mut args = vec!["eval", "--checkpoint", &post, "--metrics-out", &metrics, "--mode", "median"];
            args.extend(test_data);
            ssbnn(&args)?;
            None
        }
        Err(e) => Some(e),
    };
    let train_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut args = vec![
        "ood", "--checkpoint", &trained, "--R", "10", "--seed", SEED, "--limit", "2000", "--out", &ood,
        "--ood-images", "fmnist/t10k-images-idx3-ubyte", "--ood-labels", "fmnist/t10k-labels-idx1-ubyte",
    ];
    args.extend(test_data);
    let stdout = ssbnn(&args)?;
    let ood_seconds = start.elapsed().as_secs_f64();
    let mean_of = |series: &str| {
        stdout.lines().find_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).ok()?;
            (v["series"] == series).then(|| v["mean_entropy"].as_f64()).flatten()
        })
    };
    let ood_means = mean_of("in_domain").zip(mean_of("out_of_domain"));

    let records = read_metrics(&metrics).map_err(|e| e.to_string())?;
    Ok(Pipeline {
        dir,
        records,
        posttrain_error,
        ood_means,
        train_seconds,
        ood_seconds,
    })
}

fn criteria_6_to_8() -> Vec<Outcome> {
    let missing: Vec<_> = [
        "mnist/train-images-idx3-ubyte",
        "mnist/train-labels-idx1-ubyte",
        "mnist/t10k-images-idx3-ubyte",
        "mnist/t10k-labels-idx1-ubyte",
        "fmnist/t10k-images-idx3-ubyte",
        "fmnist/t10k-labels-idx1-ubyte",
    ]
    .into_iter()
    .filter(|f| !data_root().join(f).is_file())
    .collect();
    if !missing.is_empty() {
        let msg = format!("missing {missing:?} under data/; run scripts/fetch_datasets.sh");
        return ["6", "7", "8"].into_iter().map(|id| outcome(id, false, msg.clone())).collect();
    }

    let first = match run_pipeline() {
        Ok(p) => p,
        Err(e) => return ["6", "7", "8"].into_iter().map(|id| outcome(id, false, e.clone())).collect(),
    };
    let mut out = Vec::new();

    let find = |mode: &str, r: usize| first.records.iter().find(|m| m.mode.starts_with(mode) && m.r == r);
    let avg10 = find("avg", 10).expect("R=10 record");
    let avg1 = find("avg", 1).expect("R=1 record");
    let median = find("median", 1);
    let a = avg10.accuracy_all >= 0.90;
    let b = avg10.accuracy_all >= avg1.accuracy_all;
    let c = median.is_some_and(|m| (m.accuracy_all - avg10.accuracy_all).abs() <= 0.03);
    let d = avg10.accuracy_doubt.is_some_and(|acc| acc >= avg10.accuracy_all);
    let e = avg10.rho_per_layer[0] < PSI;
    let budget = first.train_seconds < 3600.0;
    let median_text = match (median, &first.posttrain_error) {
        (Some(m), _) => format!("{:.4}", m.accuracy_all),
        (None, Some(err)) => format!("unavailable ({err})"),
        (None, None) => "missing".into(),
    };
    let pf = |ok: bool| if ok { "ok" } else { "FAIL" };
    out.push(outcome(
        "6",
        a && b && c && d && e && budget,
        format!(
            "(a) R=10 acc {:.4} >= 0.90 {}; (b) R=1 acc {:.4} {}; (c) median acc {median_text} {}; \
             (d) doubt acc {:?} on {} classified {}; (e) layer-1 rho {:.4} < {PSI:.4} {}; {:.0}s of 3600s",
            avg10.accuracy_all,
            pf(a),
            avg1.accuracy_all,
            pf(b),
            pf(c),
            avg10.accuracy_doubt,
            avg10.num_classified,
            pf(d),
            avg10.rho_per_layer[0],
            pf(e),
            first.train_seconds
        ),
    ));

    out.push(match first.ood_means {
        Some((id, ood)) => outcome(
            "7",
            ood > id && first.ood_seconds < 300.0,
            format!(
                "mean entropy FMNIST {ood:.4} nats vs MNIST {id:.4} nats; {:.0}s of 300s",
                first.ood_seconds
            ),
        ),
        None => outcome("7", false, "ood output missing a series"),
    });

    out.push(match run_pipeline() {
        Ok(second) => {
            let files = ["train.ckpt", "post.ckpt", "metrics.jsonl", "ood.jsonl"];
            let mut compared = Vec::new();
            let mut identical = true;
            for f in files {
                let (x, y) = (first.dir.path().join(f), second.dir.path().join(f));
                match (std::fs::read(&x), std::fs::read(&y)) {
                    (Ok(p), Ok(q)) => {
                        identical &= p == q;
                        compared.push(format!("{f}: {}", if p == q { "identical" } else { "DIFFERS" }));
                    }
                    (Err(_), Err(_)) => compared.push(format!("{f}: absent in both runs")),
                    _ => {
                        identical = false;
                        compared.push(format!("{f}: present in one run only"));
                    }
                }
            }
            outcome("8", identical, compared.join("; "))
        }
        Err(e) => outcome("8", false, e),
    });
    out
}

#[test]
fn acceptance_criteria() {
    let cfg = BatteryConfig::default();
    let mut outcomes = vec![
        criterion_1(&cfg),
        criterion_2(&cfg),
        criterion_3(&cfg),
        criterion_4(&cfg),
        criterion_5(&cfg),
    ];
    outcomes.extend(criteria_6_to_8());
    outcomes.push(criterion_9());
    outcomes.push(criterion_10());

    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
