use std::path::{Path, PathBuf};

use cvfl_core::container::{self, load_checkpoint, save_checkpoint, sha256_hex};
use cvfl_core::convergence::{
    estimate_constants, report_csv, validate_bound, BoundConstants, BoundReport, ToyProblem, ValidationConfig,
};
use cvfl_core::csisim::{Dataset, SceneConfig};
use cvfl_core::cvnn::{matched_rvnn_config, real_parameter_budget, ModelKind, NetConfig, NetParams, TENSOR_NAMES};
use cvfl_core::federated::{run_experiment, trace_csv, trace_jsonl, RoundRecord, TRACE_SCHEMA_VERSION};
use cvfl_core::losses::{LossConfig, UseCase};
use cvfl_core::training::{
    batch_gradient, evaluate, grad_check, local_train, predict_batch, sampler_seed, BatchSampler, EvalMetrics, Example,
    FaultInjection, GradCheckReport, TrainConfig,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Format, SCHEMA_VERSION};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    Federated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Model {
    Cvnn,
    Rvnn,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Cvnn => ModelKind::Cvnn,
            Model::Rvnn => ModelKind::Rvnn,
        }
    }
}

fn kind_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Cvnn => "cvnn",
        ModelKind::Rvnn => "rvnn",
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Centralized => "centralized",
        Mode::Federated => "federated",
    }
}

/// Flags shared by the subcommands that run or read a model.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub mode: Mode,
    pub model: Model,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub force: bool,
    /// Tensor whose largest analytic gradient entry gets scaled before a gradient check.
    pub inject_fault: Option<String>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Federated,
            model: Model::Cvnn,
            dataset: None,
            checkpoint: None,
            force: false,
            inject_fault: None,
        }
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    container::write_atomic(&path, bytes).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    write(dir, name, text.as_bytes())
}

fn dataset_path(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.dataset
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("dataset.bin"))
}

// ---------------------------------------------------------------------------
// generate-data

#[derive(Clone, Debug, Serialize)]
pub struct DatasetSummary {
    pub schema_version: u32,
    /// File name of the dataset, relative to this summary.
    pub file: String,
    pub sha256: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub shard_sizes: Vec<usize>,
    pub los_fraction: f64,
    pub scene: SceneConfig,
}

pub fn generate_data(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<DatasetSummary, CliError> {
    let path = dataset_path(cfg, opts);
    if path.exists() && !opts.force {
        return Err(CliError::io(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    let data = Dataset::build(&cfg.scene)?;
    let bytes = data.encode()?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::config("dataset path has no file name"))?;
    write(dir, name, &bytes)?;
    let all = data.shards.iter().flatten().chain(&data.test);
    let total = data.train_len() + data.test.len();
    let summary = DatasetSummary {
        schema_version: SCHEMA_VERSION,
        file: name.to_string(),
        sha256: sha256_hex(&bytes),
        train_samples: data.train_len(),
        test_samples: data.test.len(),
        shard_sizes: data.shards.iter().map(Vec::len).collect(),
        los_fraction: all.filter(|s| s.los).count() as f64 / total as f64,
        scene: cfg.scene.clone(),
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    write_json(dir, &format!("{stem}.json"), &summary)?;
    if cfg.formats.contains(&Format::Jsonl) {
        write(dir, &format!("{stem}.jsonl"), data.to_jsonl().as_bytes())?;
    }
    Ok(summary)
}

/// Loads the dataset and checks it was generated from the configured scene.
pub fn load_dataset(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Dataset, CliError> {
    let path = dataset_path(cfg, opts);
    if !path.exists() {
        return Err(CliError::io(format!(
            "{} not found; run generate-data first",
            path.display()
        )));
    }
    let data = Dataset::load(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    if data.scene != cfg.scene {
        let (a, b) = (
            serde_json::to_value(&data.scene).unwrap(),
            serde_json::to_value(&cfg.scene).unwrap(),
        );
        let fields: Vec<&String> = a
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(CliError::config(format!(
            "{} was generated from a different scene (fields {fields:?}); regenerate it or fix the config",
            path.display()
        )));
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CdfPoint {
    pub error: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub model: ModelKind,
    pub use_case: UseCase,
    pub samples: usize,
    pub metrics: EvalMetrics,
    /// Empirical CDF of the per-sample error: positioning error in m for
    /// use case I, absolute TOA error for use case II.
    pub cdf: Vec<CdfPoint>,
}

pub struct Evaluated {
    pub summary: EvalSummary,
    pub per_sample_csv: String,
}

pub fn cdf(errors: &[f64]) -> Vec<CdfPoint> {
    let mut e = errors.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    e.iter()
        .enumerate()
        .map(|(i, &error)| CdfPoint {
            error,
            fraction: (i + 1) as f64 / n,
        })
        .collect()
}

pub fn evaluate_model(
    params: &NetParams,
    net: &NetConfig,
    loss: &LossConfig,
    data: &[Example],
) -> Result<Evaluated, CliError> {
    if data.is_empty() {
        return Err(CliError::config("evaluation set is empty; raise scene.test_fraction"));
    }
    let (metrics, _) = evaluate(params, net, loss, data)?;
    let refs: Vec<&Example> = data.iter().collect();
    let yhat = predict_batch(params, net, &refs)?;
    let mut csv = String::from("schema_version,id,target_re,target_im,pred_re,pred_im,error\n");
    let mut errors = Vec::with_capacity(data.len());
    for (ex, y) in data.iter().zip(&yhat) {
        let (a, b) = ex.targets(loss.use_case);
        let err = match loss.use_case {
            UseCase::I => (y.re - a).hypot(y.im - b),
            UseCase::II => (y.im - b).abs(),
        };
        errors.push(err);
        csv.push_str(&format!("{SCHEMA_VERSION},{},{a},{b},{},{},{err}\n", ex.id, y.re, y.im));
    }
    Ok(Evaluated {
        summary: EvalSummary {
            schema_version: SCHEMA_VERSION,
            model: params.kind,
            use_case: loss.use_case,
            samples: data.len(),
            metrics,
            cdf: cdf(&errors),
        },
        per_sample_csv: csv,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<RoundRecord>,
    pub params: NetParams,
    pub net: NetConfig,
    pub eval: EvalSummary,
    pub files: Vec<PathBuf>,
}

/// Centralized SGD that reports in the federated trace schema, with a single
/// always-transmitting participant.
pub fn train_centralized_traced(
    init: &NetParams,
    net: &NetConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    data: &[Example],
    eval_set: Option<&[Example]>,
) -> Result<(NetParams, Vec<RoundRecord>), CliError> {
    let mut sampler = BatchSampler::new(data.len(), sampler_seed(train.seed, 0));
    let mut params = init.clone();
    let mut records = Vec::with_capacity(train.iterations);
    for t in 1..=train.iterations {
        let lr = train.lr(t);
        let out = local_train(&params, net, data, train, loss, &mut sampler, lr)?;
        params = out.params;
        let mean = out.losses.iter().sum::<f64>() / out.losses.len() as f64;
        let eval = match eval_set {
            Some(d) if !d.is_empty() => Some(evaluate(&params, net, loss, d)?.0),
            _ => None,
        };
        records.push(RoundRecord {
            t,
            lr,
            global_loss: mean,
            client_losses: vec![mean],
            batch_sizes: vec![out.samples],
            r: vec![true],
            m: vec![true],
            eval,
        });
    }
    Ok((params, records))
}

fn write_traces(
    cfg: &ExperimentConfig,
    dir: &Path,
    prefix: &str,
    records: &[RoundRecord],
) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for f in &cfg.formats {
        files.push(match f {
            Format::Csv => write(dir, &format!("{prefix}_trace.csv"), trace_csv(records).as_bytes())?,
            Format::Jsonl => write(dir, &format!("{prefix}_trace.jsonl"), trace_jsonl(records).as_bytes())?,
        });
    }
    Ok(files)
}

/// Trains one model on an already loaded dataset and writes its artifacts
/// under `dir` with file names prefixed by `<model>_<mode>`.
pub fn train_on(
    cfg: &ExperimentConfig,
    net: &NetConfig,
    kind: ModelKind,
    mode: Mode,
    data: &Dataset,
    dir: &Path,
) -> Result<TrainOutcome, CliError> {
    let (shards, test) = data.examples()?;
    let init = NetParams::init(net, kind)?;
    let eval_set = (!test.is_empty()).then_some(test.as_slice());
    let (params, records) = match mode {
        Mode::Federated => {
            let out = run_experiment(net, &cfg.train, &cfg.loss, &cfg.fed, &init, shards, eval_set)?;
            (out.global, out.records)
        }
        Mode::Centralized => {
            let all: Vec<Example> = shards.into_iter().flatten().collect();
            train_centralized_traced(&init, net, &cfg.train, &cfg.loss, &all, eval_set)?
        }
    };
    if !params.is_finite() {
        return Err(CliError {
            code: crate::error::exit::RUNTIME,
            message: format!(
                "{} training diverged (non-finite parameters); lower train.eta",
                kind_name(kind)
            ),
        });
    }
    let prefix = format!("{}_{}", kind_name(kind), mode_name(mode));
    let mut files = write_traces(cfg, dir, &prefix, &records)?;
    let ckpt = dir.join(format!("{prefix}_checkpoint.bin"));
    let note = json!({
        "schema_version": SCHEMA_VERSION,
        "mode": mode,
        "use_case": cfg.loss.use_case,
        "iterations": cfg.train.iterations,
    });
    save_checkpoint(&ckpt, &params, net, note).map_err(|e| CliError::io(format!("{}: {e}", ckpt.display())))?;
    files.push(ckpt);
    let ev = evaluate_model(&params, net, &cfg.loss, &test)?;
    files.push(write_json(dir, &format!("{prefix}_eval.json"), &ev.summary)?);
    files.push(write(
        dir,
        &format!("{prefix}_errors.csv"),
        ev.per_sample_csv.as_bytes(),
    )?);
    Ok(TrainOutcome {
        records,
        params,
        net: net.clone(),
        eval: ev.summary,
        files,
    })
}

pub fn train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainOutcome, CliError> {
    let data = load_dataset(cfg, opts)?;
    train_on(cfg, &cfg.net, opts.model.into(), opts.mode, &data, &cfg.output_dir)
}

// ---------------------------------------------------------------------------
// eval

pub fn eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<EvalSummary, CliError> {
    let kind: ModelKind = opts.model.into();
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("{}_{}_checkpoint.bin", kind_name(kind), mode_name(opts.mode)))
    });
    if !ckpt.exists() {
        return Err(CliError::io(format!(
            "{} not found; train a model first or pass --checkpoint",
            ckpt.display()
        )));
    }
    let (header, params) = load_checkpoint(&ckpt).map_err(|e| CliError::io(format!("{}: {e}", ckpt.display())))?;
    if header.net.antennas != cfg.scene.antennas || header.net.subcarriers != cfg.scene.subcarriers {
        return Err(CliError::config(format!(
            "checkpoint expects {}x{} inputs, the scene produces {}x{}",
            header.net.antennas, header.net.subcarriers, cfg.scene.antennas, cfg.scene.subcarriers
        )));
    }
    let data = load_dataset(cfg, opts)?;
    let (_, test) = data.examples()?;
    let ev = evaluate_model(&params, &header.net, &cfg.loss, &test)?;
    write_json(&cfg.output_dir, "eval.json", &ev.summary)?;
    write(&cfg.output_dir, "eval_errors.csv", ev.per_sample_csv.as_bytes())?;
    Ok(ev.summary)
}

// ---------------------------------------------------------------------------
// grad-check

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub schema_version: u32,
    pub model: ModelKind,
    pub use_case: UseCase,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
    pub fault: Option<String>,
    pub report: GradCheckReport,
}

/// Inputs come from a small scene shaped like `grad_check.net`.
pub fn grad_check_inputs(cfg: &ExperimentConfig) -> Result<Vec<Example>, CliError> {
    let g = &cfg.grad_check;
    let scene = SceneConfig {
        antennas: g.net.antennas,
        subcarriers: g.net.subcarriers,
        user_count: 1,
        samples_per_user: g.batch,
        test_fraction: 0.0,
        ..cfg.scene.clone()
    };
    let data = Dataset::build(&scene)?;
    Ok(data.examples()?.0.into_iter().flatten().collect())
}

/// Initial weights with biases and modReLU offsets drawn from U(-0.1, 0.1),
/// so no pre-activation sits exactly on an activation kink.
pub fn grad_check_params(net: &NetConfig, kind: ModelKind) -> Result<NetParams, CliError> {
    let mut p = NetParams::init(net, kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(net.seed ^ 0x6772_6164);
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(-0.1..0.1);
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        if TENSOR_NAMES[i].ends_with("_bias") {
            for k in 0..t.len() {
                let im = if kind == ModelKind::Cvnn { draw(&mut rng) } else { 0.0 };
                t.set_at(k, Complex64::new(draw(&mut rng), im));
            }
        }
    }
    for q in &mut p.modrelu_q {
        *q = draw(&mut rng);
    }
    Ok(p)
}

/// Writes the report, then fails with the tolerance exit status on a breach.
pub fn grad_check_cmd(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<GradCheckSummary, CliError> {
    let g = &cfg.grad_check;
    let kind: ModelKind = opts.model.into();
    let params = grad_check_params(&g.net, kind)?;
    let data = grad_check_inputs(cfg)?;
    let batch: Vec<&Example> = data.iter().collect();
    let fault = match &opts.inject_fault {
        None => None,
        Some(name) => {
            let tensor = TENSOR_NAMES.iter().position(|n| n == name).ok_or_else(|| {
                CliError::config(format!("unknown tensor {name:?}; expected one of {TENSOR_NAMES:?}"))
            })?;
            let (_, grad) = batch_gradient(&params, &g.net, &cfg.loss, &batch)?;
            let t = grad.tensors()[tensor];
            let index = (0..t.len())
                .max_by(|&a, &b| t.at(a).norm().total_cmp(&t.at(b).norm()))
                .unwrap_or(0);
            Some(FaultInjection {
                tensor,
                index,
                factor: 1.5,
            })
        }
    };
    let report = grad_check(&params, &g.net, &cfg.loss, &batch, g.step, fault)?;
    let summary = GradCheckSummary {
        schema_version: SCHEMA_VERSION,
        model: kind,
        use_case: cfg.loss.use_case,
        step: g.step,
        tol: g.tol,
        passed: report.max_rel_err <= g.tol,
        fault: opts.inject_fault.clone(),
        report,
    };
    write_json(&cfg.output_dir, "grad_check.json", &summary)?;
    if !summary.passed {
        return Err(CliError::tolerance(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e} at {:?}",
            summary.report.max_rel_err, g.tol, summary.report.worst
        )));
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// bound

#[derive(Clone, Debug, Serialize)]
pub struct BoundSummary {
    pub schema_version: u32,
    pub p_r: f64,
    pub p_m: f64,
    pub constants: BoundConstants,
    pub constants_fitted: bool,
    pub a: f64,
    /// `1 - mu/Z`, the lossless contraction factor.
    pub lossless_ratio: f64,
    pub asymptotic_gap: Option<f64>,
    pub initial_gap: f64,
    pub final_mean_gap: f64,
    pub max_decay_ratio: Option<f64>,
    pub bound_holds: bool,
}

pub fn bound(cfg: &ExperimentConfig) -> Result<(BoundSummary, BoundReport), CliError> {
    let b = &cfg.bound;
    let problem = ToyProblem::generate(&b.toy)?;
    let pr = vec![b.p_r; b.toy.clients];
    let pm = vec![b.p_m; b.toy.clients];
    let constants = match &b.constants {
        Some(c) => c.clone(),
        None => estimate_constants(&problem, &pr, &pm, b.toy.seed)?,
    };
    let vcfg = ValidationConfig {
        rounds: b.rounds,
        seeds: b.seeds,
        mask_policy: b.mask_policy(),
        aggregation: b.aggregation,
    };
    let report = validate_bound(&problem, &constants, &vcfg)?;
    let summary = BoundSummary {
        schema_version: SCHEMA_VERSION,
        p_r: b.p_r,
        p_m: b.p_m,
        lossless_ratio: 1.0 - constants.mu / constants.z,
        asymptotic_gap: constants.asymptotic_gap(),
        constants_fitted: b.constants.is_none(),
        a: report.a,
        constants,
        initial_gap: report.initial_gap,
        final_mean_gap: report.final_mean_gap,
        max_decay_ratio: report.max_decay_ratio,
        bound_holds: report.bound_holds,
    };
    let dir = &cfg.output_dir;
    write(dir, "bound.csv", report_csv(&report).as_bytes())?;
    if cfg.formats.contains(&Format::Jsonl) {
        let mut s = String::new();
        for r in &report.rows {
            let mut v = serde_json::to_value(r).map_err(|e| CliError::io(e.to_string()))?;
            v["schema_version"] = json!(TRACE_SCHEMA_VERSION);
            s.push_str(&v.to_string());
            s.push('\n');
        }
        write(dir, "bound.jsonl", s.as_bytes())?;
    }
    write_json(dir, "bound.json", &summary)?;
    Ok((summary, report))
}

// ---------------------------------------------------------------------------
// compare

#[derive(Clone, Debug, Serialize)]
pub struct ModelSide {
    pub net: NetConfig,
    pub real_parameters: usize,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSummary {
    pub schema_version: u32,
    pub mode: Mode,
    pub use_case: UseCase,
    pub cvnn: ModelSide,
    pub rvnn: ModelSide,
    /// `(rvnn - cvnn) / rvnn` of the headline error: mean positioning error
    /// for use case I, TOA MSE for use case II. Positive favours the CVNN.
    pub error_gain: Option<f64>,
    /// CVNN minus RVNN LOS accuracy (use case II).
    pub los_accuracy_gain: Option<f64>,
}

/// Runs the complex model and the real baseline with a matched real
/// parameter budget on the same data and seed.
pub fn compare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CompareSummary, CliError> {
    let data = load_dataset(cfg, opts)?;
    let rnet = matched_rvnn_config(&cfg.net)?;
    let c = train_on(cfg, &cfg.net, ModelKind::Cvnn, opts.mode, &data, &cfg.output_dir)?;
    let r = train_on(cfg, &rnet, ModelKind::Rvnn, opts.mode, &data, &cfg.output_dir)?;
    let headline = |m: &EvalMetrics| match cfg.loss.use_case {
        UseCase::I => m.mean_positioning_error,
        UseCase::II => m.toa_mse,
    };
    let error_gain = match (headline(&c.eval.metrics), headline(&r.eval.metrics)) {
        (Some(a), Some(b)) if b > 0.0 => Some((b - a) / b),
        _ => None,
    };
    let los_accuracy_gain = match (c.eval.metrics.los_accuracy, r.eval.metrics.los_accuracy) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let summary = CompareSummary {
        schema_version: SCHEMA_VERSION,
        mode: opts.mode,
        use_case: cfg.loss.use_case,
        cvnn: ModelSide {
            real_parameters: real_parameter_budget(&cfg.net, ModelKind::Cvnn)?,
            net: cfg.net.clone(),
            metrics: c.eval.metrics,
        },
        rvnn: ModelSide {
            real_parameters: real_parameter_budget(&rnet, ModelKind::Rvnn)?,
            net: rnet,
            metrics: r.eval.metrics,
        },
        error_gain,
        los_accuracy_gain,
    };
    write_json(&cfg.output_dir, "compare.json", &summary)?;
    Ok(summary)
}
