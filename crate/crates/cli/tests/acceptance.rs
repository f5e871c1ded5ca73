//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! straight to stdout (bypassing the harness capture) and then asserts.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use cvfl_cli::commands::{self, grad_check_inputs, grad_check_params, Mode};
use cvfl_cli::config::ExperimentConfig;
use cvfl_core::csisim::{normalize_csi, Dataset, Domain, NormAxis, Obstacle, SceneConfig};
use cvfl_core::ctensor::{avgpool1d, cconv2d, cmatmul, ComplexTensor, Padding};
use cvfl_core::cvnn::{count_params, crelu, forward, modrelu, Activation, Init, ModelKind, NetConfig, NetParams};
use cvfl_core::federated::{FedConfig, FedState};
use cvfl_core::losses::{LossConfig, UseCase};
use cvfl_core::training::{grad_check, local_train, sampler_seed, BatchSampler, Example, TrainConfig};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Criteria run one at a time so each runtime is measured without contention.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, pass: bool, elapsed: Duration, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n:>2} {name:<28} {verdict}  ({:.1}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ComplexTensor {
    let n: usize = shape.iter().product();
    let v: Vec<Complex64> = (0..n)
        .map(|_| c(r.random_range(-scale..scale), r.random_range(-scale..scale)))
        .collect();
    ComplexTensor::from_complex(shape, &v).unwrap()
}

fn max_diff(t: &ComplexTensor, want: &[Complex64]) -> f64 {
    assert_eq!(t.len(), want.len());
    t.iter().zip(want).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

fn tiny_cfg() -> ExperimentConfig {
    ExperimentConfig::default()
}

#[test]
fn criterion_01_gradient_correctness() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..20 {
        let mut cfg = tiny_cfg();
        cfg.set_seed(seed);
        let net = &cfg.grad_check.net;
        assert_eq!((net.antennas, net.subcarriers), (2, 16));
        let params = grad_check_params(net, ModelKind::Cvnn).unwrap();
        let data = grad_check_inputs(&cfg).unwrap();
        let batch: Vec<&Example> = data.iter().collect();
        for use_case in [UseCase::I, UseCase::II] {
            let loss = LossConfig {
                use_case,
                ..LossConfig::default()
            };
            let r = grad_check(&params, net, &loss, &batch, 1e-6, None).unwrap();
            worst = worst.max(r.max_rel_err);
            checks += r.checked;
        }
    }
    let pass = worst <= 1e-6 && start.elapsed() < Duration::from_secs(120);
    report(
        1,
        "gradient correctness",
        pass,
        start.elapsed(),
        format!("max rel err {worst:.2e} over {checks} scalars"),
    );
    assert!(pass);
}

fn naive_conv(x: &ComplexTensor, k: &ComplexTensor, b: &ComplexTensor, same: bool) -> (Vec<usize>, Vec<Complex64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl, oh, ow) = if same {
        ((kh - 1) / 2, (kw - 1) / 2, h, w)
    } else {
        (0, 0, h + 1 - kh, w + 1 - kw)
    };
    let mut out = Vec::new();
    for oc in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.get(&[oc]);
                for ch in 0..ci {
                    for a in 0..kh {
                        for bb in 0..kw {
                            let (yy, xx) = ((i + a) as isize - pt as isize, (j + bb) as isize - pl as isize);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                let (p, q) = (k.get(&[oc, ch, a, bb]), x.get(&[ch, yy as usize, xx as usize]));
                                acc += c(p.re * q.re - p.im * q.im, p.re * q.im + p.im * q.re);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![o, oh, ow], out)
}

#[test]
fn criterion_02_kernel_oracles() {
    let _guard = serial();
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut shapes) = (0.0f64, [0usize; 3]);

    while shapes[0] < 100 {
        let (m, k, n) = (r.random_range(1..9), r.random_range(1..12), r.random_range(1..9));
        let a = random_tensor(&mut r, &[m, k], 2.0);
        let b = random_tensor(&mut r, &[k, n], 2.0);
        let mut want = vec![c(0.0, 0.0); m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    let (x, y) = (a.get(&[i, l]), b.get(&[l, j]));
                    want[i * n + j] += c(x.re * y.re - x.im * y.im, x.re * y.im + x.im * y.re);
                }
            }
        }
        let got = cmatmul(&a, &b).unwrap();
        assert_eq!(got.shape(), [m, n]);
        worst = worst.max(max_diff(&got, &want));
        shapes[0] += 1;
    }

    while shapes[1] < 100 {
        let (ci, h, w) = (r.random_range(1..4), r.random_range(1..7), r.random_range(1..12));
        let (o, kh, kw) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
        let same = r.random_bool(0.5);
        if !same && (kh > h || kw > w) {
            continue;
        }
        let x = random_tensor(&mut r, &[ci, h, w], 1.5);
        let k = random_tensor(&mut r, &[o, ci, kh, kw], 1.5);
        let b = random_tensor(&mut r, &[o], 1.5);
        let got = cconv2d(&x, &k, &b, if same { Padding::Same } else { Padding::Valid }).unwrap();
        let (shape, want) = naive_conv(&x, &k, &b, same);
        assert_eq!(got.shape(), shape.as_slice());
        worst = worst.max(max_diff(&got, &want));
        shapes[1] += 1;
    }

    while shapes[2] < 100 {
        let rank = r.random_range(0..3);
        let lead: Vec<usize> = (0..rank).map(|_| r.random_range(1..4)).collect();
        let w = r.random_range(1..20);
        let (win, stride) = (r.random_range(1..=w), r.random_range(1..4));
        let mut shape = lead.clone();
        shape.push(w);
        let x = random_tensor(&mut r, &shape, 3.0);
        let out_w = (w - win) / stride + 1;
        let mut want = Vec::new();
        for row in 0..x.len() / w {
            for j in 0..out_w {
                let s: Complex64 = (0..win).map(|t| x.at(row * w + j * stride + t)).sum();
                want.push(s / win as f64);
            }
        }
        worst = worst.max(max_diff(&avgpool1d(&x, win, stride).unwrap(), &want));
        shapes[2] += 1;
    }

    let pass = worst <= 1e-12 && start.elapsed() < Duration::from_secs(60);
    report(
        2,
        "kernel oracles",
        pass,
        start.elapsed(),
        format!("max abs err {worst:.2e}, shapes {shapes:?}"),
    );
    assert!(pass);
}

fn tiny_net(seed: u64) -> NetConfig {
    NetConfig {
        seed,
        ..ExperimentConfig::default().grad_check.net
    }
}

#[test]
fn criterion_03_federation_degeneracy() {
    let _guard = serial();
    let start = Instant::now();
    let net = tiny_net(3);
    let scene = SceneConfig {
        subcarriers: net.subcarriers,
        user_count: 1,
        samples_per_user: 40,
        seed: 3,
        ..SceneConfig::default()
    };
    let (shards, _) = Dataset::build(&scene).unwrap().examples().unwrap();
    let data = shards[0].clone();
    let train = TrainConfig {
        eta: 0.05,
        iterations: 50,
        batch_size: 8,
        local_steps: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let fed = FedConfig {
        clients: 1,
        ..FedConfig::default()
    };
    let mut worst: f64 = 0.0;
    for use_case in [UseCase::I, UseCase::II] {
        let loss = LossConfig {
            use_case,
            ..LossConfig::default()
        };
        let init = NetParams::init(&net, ModelKind::Cvnn).unwrap();
        let mut state = FedState::new(&net, &train, &loss, &fed, &init, vec![data.clone()]).unwrap();
        let mut sampler = BatchSampler::new(data.len(), sampler_seed(train.seed, 0));
        let mut central = init.clone();
        for t in 1..=train.iterations {
            state.run_round(t, None).unwrap();
            central = local_train(&central, &net, &data, &train, &loss, &mut sampler, train.lr(t))
                .unwrap()
                .params;
            let (a, b) = (state.global.real_part(), central.real_part());
            let (ai, bi) = (state.global.imag_part(), central.imag_part());
            let d = a
                .iter()
                .zip(&b)
                .chain(ai.iter().zip(&bi))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    let pass = worst <= 1e-12;
    report(
        3,
        "federation degeneracy",
        pass,
        start.elapsed(),
        format!("max param diff {worst:.2e} over 50 iterations"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_lossless_contraction() {
    let _guard = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.output_dir = dir.path().to_path_buf();
    let (s, report_) = commands::bound(&cfg).unwrap();
    let ratio = report_.max_decay_ratio.unwrap_or(f64::INFINITY);
    let limit = s.lossless_ratio + 0.02;
    let pass = s.bound_holds
        && ratio <= limit
        && report_.rows.len() == cfg.bound.rounds
        && start.elapsed() < Duration::from_secs(60);
    report(
        4,
        "lossless contraction",
        pass,
        start.elapsed(),
        format!(
            "worst ratio {ratio:.4} <= {limit:.4}, bound holds {} over {} seeds",
            s.bound_holds, cfg.bound.seeds
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_gap_grows_with_loss() {
    let _guard = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut gaps = Vec::new();
    for p in [0.25, 0.5, 1.0] {
        let mut cfg = tiny_cfg();
        cfg.output_dir = dir.path().to_path_buf();
        cfg.bound.p_r = p;
        cfg.bound.p_m = p;
        let (s, _) = commands::bound(&cfg).unwrap();
        gaps.push(s.final_mean_gap);
    }
    let pass = gaps[0] > gaps[1] && gaps[1] > gaps[2] && start.elapsed() < Duration::from_secs(120);
    report(
        5,
        "gap ordering under loss",
        pass,
        start.elapsed(),
        format!(
            "final mean gap p=0.25 {:.3e}, p=0.5 {:.3e}, p=1 {:.3e}",
            gaps[0], gaps[1], gaps[2]
        ),
    );
    assert!(pass);
}

/// Single-path scene on a narrow band: the phase across antennas and
/// subcarriers carries the geometry.
fn positioning_config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.path_count = [1, 1];
    cfg.scene.subcarrier_spacing = 30e3;
    cfg.scene.samples_per_user = 200;
    cfg.net.activation = Activation::Crelu;
    cfg.net.init = Init::Glorot;
    cfg.train.eta = 1e-2;
    cfg.train.iterations = 85;
    cfg.output_dir = out.to_path_buf();
    cfg.set_seed(seed);
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_06_cvnn_beats_matched_rvnn() {
    let _guard = serial();
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = positioning_config(seed, dir.path());
        let opts = commands::RunOptions {
            mode: Mode::Federated,
            ..Default::default()
        };
        commands::generate_data(&cfg, &opts).unwrap();
        let s = commands::compare(&cfg, &opts).unwrap();
        let (cv, rv) = (
            s.cvnn.metrics.mean_positioning_error.unwrap(),
            s.rvnn.metrics.mean_positioning_error.unwrap(),
        );
        wins += usize::from(cv <= rv);
        detail.push(format!("{cv:.2}/{rv:.2}"));
    }
    let pass = wins >= 4 && start.elapsed() < Duration::from_secs(600);
    report(
        6,
        "cvnn vs matched rvnn",
        pass,
        start.elapsed(),
        format!("{wins}/5 wins, cvnn/rvnn mean error m: {}", detail.join(" ")),
    );
    assert!(pass);
}

/// Thin wall between the server and part of the room; time-domain input so
/// the delay profile is visible to the convolutions.
fn dual_task_config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scene.obstacles = vec![Obstacle {
        min: [4.0, 2.5],
        max: [4.2, 5.5],
    }];
    cfg.scene.blockage_loss_db = 15.0;
    cfg.scene.path_threshold_db = 40.0;
    cfg.scene.domain = Domain::Time;
    cfg.scene.subcarriers = 125;
    cfg.scene.subcarrier_spacing = 2.4e6;
    cfg.scene.samples_per_user = 200;
    cfg.net.subcarriers = 125;
    cfg.net.init = Init::He;
    cfg.train.eta = 1.5e-2;
    cfg.train.iterations = 40;
    cfg.train.local_steps = 4;
    cfg.train.batch_size = 128;
    cfg.loss.use_case = UseCase::II;
    cfg.loss.beta = 0.5;
    cfg.output_dir = out.to_path_buf();
    cfg.set_seed(seed);
    cfg.validate().unwrap();
    cfg
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_07_dual_task_head() {
    let _guard = serial();
    let start = Instant::now();
    let mut accs = Vec::new();
    let mut toa_by_seed = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dual_task_config(seed, dir.path());
        let data = Dataset::build(&cfg.scene).unwrap();
        let out = commands::train_on(&cfg, &cfg.net, ModelKind::Cvnn, Mode::Federated, &data, dir.path()).unwrap();
        accs.push(out.eval.metrics.los_accuracy.unwrap());
        let toa: Vec<f64> = out
            .records
            .iter()
            .map(|r| r.eval.as_ref().unwrap().toa_mse.unwrap())
            .collect();
        toa_by_seed.push(toa);
    }
    let med_toa: Vec<f64> = (0..20)
        .map(|t| median(&mut toa_by_seed.iter().map(|v| v[t]).collect::<Vec<_>>()))
        .collect();
    let decreasing = med_toa.windows(2).all(|w| w[1] < w[0]);
    let med_acc = median(&mut accs.clone());
    let pass = med_acc >= 0.9 && decreasing && start.elapsed() < Duration::from_secs(600);
    report(
        7,
        "dual-task head",
        pass,
        start.elapsed(),
        format!(
            "median LOS accuracy {med_acc:.3} (seeds {accs:.3?}), median TOA MSE {:.3} -> {:.3} strictly decreasing: {decreasing}",
            med_toa[0], med_toa[19]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_normalization_and_activations() {
    let _guard = serial();
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..500 {
        let (ch, l) = (r.random_range(1..5), r.random_range(1..40));
        let scale = r.random_range(0.01..100.0);
        let h = random_tensor(&mut r, &[ch, l], scale);
        for axis in [NormAxis::PerAntenna, NormAxis::PerFeature] {
            let once = normalize_csi(&h, axis).unwrap().h;
            let twice = normalize_csi(&once, axis).unwrap().h;
            worst = worst.max(once.max_abs_diff(&twice));
            let (outer, inner) = match axis {
                NormAxis::PerAntenna => (ch, l),
                NormAxis::PerFeature => (l, ch),
            };
            for a in 0..outer {
                let peak = (0..inner)
                    .map(|b| match axis {
                        NormAxis::PerAntenna => once.get(&[a, b]).norm(),
                        NormAxis::PerFeature => once.get(&[b, a]).norm(),
                    })
                    .fold(0.0, f64::max);
                worst = worst.max((peak - 1.0).abs());
            }
        }

        let z = random_tensor(&mut r, &[ch, l], 3.0);
        let once = crelu(&z);
        exact &= crelu(&once) == once;
        let q = r.random_range(-2.0..2.0);
        let m = modrelu(&z, q);
        for k in 0..z.len() {
            let (zi, mi) = (z.at(k), m.at(k));
            let want = (zi.norm() + q).max(0.0);
            worst = worst.max((mi.norm() - want).abs());
            if want > 0.0 {
                worst = worst.max((mi.arg() - zi.arg()).abs());
            }
        }
    }
    let pass = exact && worst <= 1e-12;
    report(
        8,
        "normalization/activations",
        pass,
        start.elapsed(),
        format!("max deviation {worst:.2e}, crelu idempotent: {exact}"),
    );
    assert!(pass);
}

fn random_net(r: &mut ChaCha8Rng) -> NetConfig {
    loop {
        let cfg = NetConfig {
            antennas: r.random_range(1..4),
            subcarriers: r.random_range(4..40),
            conv1_channels: r.random_range(1..5),
            conv1_kernel: r.random_range(1..4),
            pool1_window: r.random_range(1..4),
            pool1_stride: r.random_range(1..3),
            conv2_channels: r.random_range(1..5),
            conv2_kernel: r.random_range(1..4),
            pool2_window: r.random_range(1..4),
            pool2_stride: r.random_range(1..3),
            fc1_units: r.random_range(1..9),
            fc2_units: r.random_range(1..9),
            activation: if r.random_bool(0.5) {
                Activation::Crelu
            } else {
                Activation::Modrelu
            },
            padding: if r.random_bool(0.5) {
                Padding::Same
            } else {
                Padding::Valid
            },
            ..NetConfig::default()
        };
        if cfg.validate().is_ok() {
            return cfg;
        }
    }
}

#[test]
fn criterion_09_complexity_counters() {
    let _guard = serial();
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..50 {
        let cfg = random_net(&mut r);
        for kind in [ModelKind::Cvnn, ModelKind::Rvnn] {
            let counts = count_params(&cfg, kind).unwrap();
            let p = NetParams::init(&cfg, kind).unwrap();
            let walk: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
            let (_, cache) = forward(&p, &cfg, &ComplexTensor::zeros(&[cfg.antennas, cfg.subcarriers])).unwrap();
            let d = cache.flat.len();
            let (o1, o2, s1, s2, n1, n2) = (
                cfg.conv1_channels,
                cfg.conv2_channels,
                cfg.conv1_kernel,
                cfg.conv2_kernel,
                cfg.fc1_units,
                cfg.fc2_units,
            );
            let io = if kind == ModelKind::Cvnn { 1 } else { 2 };
            let closed = [
                o1 * io * s1 * s1 + o1,
                o2 * o1 * s2 * s2 + o2,
                d * n1 + n1,
                n1 * n2 + n2,
                n2 * io + io,
            ];
            let got = [counts.conv1, counts.conv2, counts.fc1, counts.fc2, counts.out];
            let walked: Vec<usize> = walk.chunks(2).map(|w| w[0] + w[1]).collect();
            if got.as_slice() != walked.as_slice()
                || got != closed
                || counts.total != walk.iter().sum::<usize>()
                || counts.modrelu_q != p.modrelu_q.len()
            {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(
        9,
        "complexity counters",
        pass,
        start.elapsed(),
        format!("{mismatches} mismatches over 50 configs x 2 kinds"),
    );
    assert!(pass);
}

fn cli_run(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_cvfl"))
        .arg(args[0])
        .args([
            "--set",
            "scene.samples_per_user=20",
            "--set",
            "train.iterations=5",
            "--set",
            "train.eta=0.001",
            "--set",
            "formats=[\"csv\",\"jsonl\"]",
            "--seed",
            "17",
        ])
        .args(&args[1..])
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap_or(-1)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
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
fn criterion_10_determinism() {
    let _guard = serial();
    let start = Instant::now();
    let commands: [&[&str]; 8] = [
        &["generate-data"],
        &["train"],
        &["train", "--mode", "centralized", "--model", "rvnn"],
        &["eval"],
        &["grad-check"],
        &["grad-check", "--model", "rvnn", "--set", "loss.use_case=\"II\""],
        &["bound", "--set", "bound.p_r=0.5"],
        &["compare"],
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut failures = Vec::new();
    for d in [a.path(), b.path()] {
        for cmd in commands {
            let code = cli_run(d, cmd);
            if code != 0 {
                failures.push(format!("{cmd:?} exited {code}"));
            }
        }
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let names: Vec<&str> = sa.iter().map(|(n, _)| n.as_str()).collect();
    if names != sb.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>() {
        failures.push("file sets differ".into());
    }
    for ((n, x), (_, y)) in sa.iter().zip(&sb) {
        if x != y {
            failures.push(format!("{n} differs"));
        }
    }
    let pass = failures.is_empty() && sa.len() >= 20;
    report(
        10,
        "determinism",
        pass,
        start.elapsed(),
        if pass {
            format!("{} files byte-identical across reruns", sa.len())
        } else {
            failures.join("; ")
        },
    );
    assert!(pass, "{failures:?}");
}
