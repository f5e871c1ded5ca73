use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cvfl_cli::config::{apply_set, ExperimentConfig};
use cvfl_cli::error::exit;
use cvfl_core::container::load_checkpoint;
use cvfl_core::csisim::Dataset;
use cvfl_core::cvnn::predict;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvfl"))
}

/// Small enough to train in well under a second.
const SMALL: &[&str] = &[
    "--set",
    "scene.samples_per_user=20",
    "--set",
    "train.iterations=4",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.eta=0.001",
];

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    // Subcommand first, then the small defaults, then the caller's flags so they win.
    let out = bin()
        .arg(args[0])
        .args(SMALL)
        .args(&args[1..])
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawn cvfl");
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap_or(-1), text)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn config_mutations_are_rejected_with_the_config_status() {
    let bad = [
        "nope=1",
        "train.nope=1",
        "train.eta=0",
        "train.eta=-1",
        "train.eta=\"fast\"",
        "train.iterations=0",
        "train.batch_size=0",
        "train.local_steps=0",
        "net.subcarriers=64",
        "net.conv1_kernel=0",
        "scene.antennas=3",
        "scene.user_count=3",
        "fed.clients=0",
        "loss.alpha=1",
        "loss.beta=0",
        "loss.use_case=\"III\"",
        "net.activation=\"relu\"",
        "formats=[]",
        "formats=[\"xml\"]",
        "schema_version=2",
        "bound.p_r=1.5",
        "bound.p_m=-0.1",
        "bound.rounds=0",
        "grad_check.tol=0",
        "grad_check.batch=0",
        "output_dir=\"\"",
        "scene.test_fraction=1.5",
        "train.eta",
    ];
    for s in bad {
        let err = ExperimentConfig::load(None, &[s.to_string()]).expect_err(s);
        assert_eq!(err.code, exit::CONFIG, "{s}: {}", err.message);
    }

    let good = [
        "formats=[\"csv\",\"jsonl\"]",
        "train.schedule=\"constant\"",
        "net.activation=\"modrelu\"",
        "loss.use_case=\"II\"",
        "bound.p_r=0.25",
    ];
    for s in good {
        ExperimentConfig::load(None, &[s.to_string()]).unwrap_or_else(|e| panic!("{s}: {e}"));
    }

    // Overrides apply in order, so a later one can repair an earlier one.
    let sets = ["scene.user_count=3", "fed.clients=3"].map(String::from);
    let cfg = ExperimentConfig::load(None, &sets).unwrap();
    assert_eq!(cfg.fed.clients, 3);
}

#[test]
fn apply_set_parses_json_and_falls_back_to_strings() {
    let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
    apply_set(&mut v, "train.eta=0.5").unwrap();
    apply_set(&mut v, "output_dir=runs/a").unwrap();
    apply_set(&mut v, "scene.obstacles=[{\"min\":[1,1],\"max\":[2,2]}]").unwrap();
    assert_eq!(v["train"]["eta"], Value::from(0.5));
    assert_eq!(v["output_dir"], Value::from("runs/a"));
    let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
    assert_eq!(cfg.scene.obstacles.len(), 1);
}

#[test]
fn config_files_round_trip_and_bad_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let path = dir.path().join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(Some(&path), &[]).unwrap(), cfg);

    fs::write(&path, r#"{"train": {"eta": 0.01, "momentum": 0.9}}"#).unwrap();
    assert_eq!(ExperimentConfig::load(Some(&path), &[]).unwrap_err().code, exit::CONFIG);
    fs::write(&path, "{ not json").unwrap();
    assert_eq!(ExperimentConfig::load(Some(&path), &[]).unwrap_err().code, exit::CONFIG);
    let missing = dir.path().join("missing.json");
    assert_eq!(ExperimentConfig::load(Some(&missing), &[]).unwrap_err().code, exit::IO);

    // A partial file keeps the defaults for everything it leaves out.
    fs::write(&path, r#"{"train": {"eta": 0.01}}"#).unwrap();
    let partial = ExperimentConfig::load(Some(&path), &[]).unwrap();
    assert_eq!(partial.train.eta, 0.01);
    assert_eq!(partial.train.iterations, cfg.train.iterations);
}

#[test]
fn exit_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, text) = run(d, &["train"]);
    assert_eq!(code, exit::IO, "train without a dataset: {text}");
    assert_eq!(run(d, &["generate-data"]).0, exit::OK);
    assert_eq!(run(d, &["generate-data"]).0, exit::IO, "overwrite without --force");
    assert_eq!(run(d, &["generate-data", "--force"]).0, exit::OK);
    assert_eq!(run(d, &["train", "--set", "train.eta=0"]).0, exit::CONFIG);
    assert_eq!(
        run(d, &["train", "--set", "scene.seed=9"]).0,
        exit::CONFIG,
        "dataset/scene mismatch"
    );
    assert_eq!(run(d, &["eval"]).0, exit::IO, "no checkpoint yet");
    assert_eq!(run(d, &["train"]).0, exit::OK);
    assert_eq!(run(d, &["eval"]).0, exit::OK);
    assert_eq!(run(d, &["grad-check"]).0, exit::OK);
    assert_eq!(run(d, &["grad-check", "--inject-fault"]).0, exit::TOLERANCE);
    assert_eq!(
        run(d, &["grad-check", "--inject-fault", "fc2_weight"]).0,
        exit::TOLERANCE
    );
    assert_eq!(run(d, &["grad-check", "--inject-fault", "fc9"]).0, exit::CONFIG);
    assert_eq!(run(d, &["bound"]).0, exit::OK);
    let (code, _) = run(d, &["train", "--set", "train.eta=1e6"]);
    assert_eq!(code, exit::RUNTIME, "divergence");

    let report: Value = serde_json::from_slice(&fs::read(d.join("grad_check.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], Value::Bool(false));
    assert_eq!(report["fault"], Value::from("fc2_weight"));
}

#[test]
fn reruns_are_byte_identical_and_carry_schema_versions() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let extra = ["--set", "formats=[\"csv\",\"jsonl\"]", "--seed", "5"];
    for d in [a.path(), b.path()] {
        for cmd in [
            &["generate-data"][..],
            &["train"],
            &["train", "--mode", "centralized"],
            &["eval"],
            &["bound"],
            &["grad-check"],
        ] {
            let args: Vec<&str> = cmd.iter().chain(&extra).copied().collect();
            let (code, text) = run(d, &args);
            assert_eq!(code, 0, "{cmd:?}: {text}");
        }
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }

    for (name, bytes) in &fa {
        let text = String::from_utf8_lossy(bytes);
        if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["schema_version"], Value::from(1), "{name}");
        } else if name.ends_with(".csv") {
            assert!(text.starts_with("schema_version,"), "{name}");
            assert!(text.lines().skip(1).all(|l| l.starts_with("1,")), "{name}");
        } else if name.ends_with(".jsonl") && !name.starts_with("dataset") {
            for line in text.lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                assert_eq!(v["schema_version"], Value::from(1), "{name}");
            }
        }
    }

    // A different seed changes the data.
    let c = tempfile::tempdir().unwrap();
    run(c.path(), &["generate-data", "--seed", "6"]);
    assert_ne!(
        fs::read(c.path().join("dataset.bin")).unwrap(),
        fs::read(a.path().join("dataset.bin")).unwrap()
    );
}

#[test]
fn eval_matches_a_hand_loop() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["generate-data"]).0, 0);
    assert_eq!(run(d, &["train"]).0, 0);
    assert_eq!(run(d, &["eval"]).0, 0);

    let (header, params) = load_checkpoint(&d.join("cvnn_federated_checkpoint.bin")).unwrap();
    let data = Dataset::load(&d.join("dataset.bin")).unwrap();
    let (_, test) = data.examples().unwrap();
    assert!(test.len() >= 10);

    let csv = fs::read_to_string(d.join("eval_errors.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), test.len());

    let mut sum = 0.0;
    for (ex, row) in test.iter().zip(&rows) {
        let y = predict(&params, &header.net, &ex.input).unwrap();
        let err = ((y.re - ex.position[0]).powi(2) + (y.im - ex.position[1]).powi(2)).sqrt();
        sum += err;
        if ex.id < test[0].id + 10 {
            assert_eq!(row[1], ex.id as f64);
            assert!((row[4] - y.re).abs() < 1e-12 && (row[5] - y.im).abs() < 1e-12);
            assert!((row[6] - err).abs() < 1e-12);
        }
    }
    let eval: Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let mean = eval["metrics"]["mean_positioning_error"].as_f64().unwrap();
    assert!((mean - sum / test.len() as f64).abs() < 1e-12);

    let cdf = eval["cdf"].as_array().unwrap();
    assert_eq!(cdf.len(), test.len());
    let pts: Vec<(f64, f64)> = cdf
        .iter()
        .map(|p| (p["error"].as_f64().unwrap(), p["fraction"].as_f64().unwrap()))
        .collect();
    assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
    assert_eq!(pts.last().unwrap().1, 1.0);

    // The train command's own evaluation agrees with the standalone one.
    let own: Value = serde_json::from_str(&fs::read_to_string(d.join("cvnn_federated_eval.json")).unwrap()).unwrap();
    assert_eq!(own, eval);
}

fn trace_rows(path: PathBuf) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn one_client_federated_trace_equals_centralized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let one = [
        "--set",
        "scene.user_count=1",
        "--set",
        "fed.clients=1",
        "--set",
        "train.iterations=12",
    ];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(&one).map(|s| s.to_string()).collect() };
    let call = |cmd: &[&str]| {
        let args = with(cmd);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, text) = run(d, &args);
        assert_eq!(code, 0, "{text}");
    };
    call(&["generate-data"]);
    call(&["train", "--mode", "federated"]);
    call(&["train", "--mode", "centralized"]);
    let fed = trace_rows(d.join("cvnn_federated_trace.csv"));
    let cen = trace_rows(d.join("cvnn_centralized_trace.csv"));
    assert_eq!(fed.len(), 13);
    assert_eq!(fed, cen);
    let (_, a) = load_checkpoint(&d.join("cvnn_federated_checkpoint.bin")).unwrap();
    let (_, b) = load_checkpoint(&d.join("cvnn_centralized_checkpoint.bin")).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn compare_uses_a_matched_budget() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["generate-data"]).0, 0);
    let (code, text) = run(d, &["compare"]);
    assert_eq!(code, 0, "{text}");
    let v: Value = serde_json::from_str(&fs::read_to_string(d.join("compare.json")).unwrap()).unwrap();
    let c = v["cvnn"]["real_parameters"].as_f64().unwrap();
    let r = v["rvnn"]["real_parameters"].as_f64().unwrap();
    assert!((r - c).abs() / c < 0.05, "cvnn {c} vs rvnn {r}");
    assert!(v["error_gain"].is_number());
    assert!(d.join("rvnn_federated_trace.csv").exists());
}
