use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvfl_cli::commands::{self, Mode, Model, RunOptions};
use cvfl_cli::config::ExperimentConfig;
use cvfl_cli::error::CliError;

#[derive(Parser)]
#[command(name = "cvfl", version, about = "Federated complex-valued CSI positioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.eta=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Seed for every random stream (scene, init, batches, masks).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "federated")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "cvnn")]
    model: Model,
    /// Dataset file; defaults to `<output_dir>/dataset.bin`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scene and write the dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overwrite an existing dataset file.
        #[arg(long)]
        force: bool,
    },
    /// Train one model and write its trace, checkpoint and evaluation.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Defaults to `<output_dir>/<model>_<mode>_checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "cvnn")]
        model: Model,
        /// Corrupt the analytic gradient of one tensor to confirm the check fires.
        #[arg(long, value_name = "TENSOR", num_args = 0..=1, default_missing_value = "out_bias")]
        inject_fault: Option<String>,
    },
    /// Validate the partial-transmission convergence bound on a toy problem.
    Bound {
        #[command(flatten)]
        common: Common,
    },
    /// Train the CVNN and a parameter-matched RVNN on the same data.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "federated")]
        mode: Mode,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(format!("{}: {e}", cfg.output_dir.display())))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { common, dataset, force } => {
            let cfg = load(&common)?;
            let opts = RunOptions {
                dataset,
                force,
                ..RunOptions::default()
            };
            let s = commands::generate_data(&cfg, &opts)?;
            println!(
                "wrote {} ({} train, {} test, LOS {:.2}, sha256 {})",
                s.file,
                s.train_samples,
                s.test_samples,
                s.los_fraction,
                &s.sha256[..16]
            );
        }
        Command::Train { common, model } => {
            let cfg = load(&common)?;
            let opts = RunOptions {
                mode: model.mode,
                model: model.model,
                dataset: model.dataset,
                ..RunOptions::default()
            };
            let out = commands::train(&cfg, &opts)?;
            if let Some(last) = out.records.last() {
                println!("round {}: loss {:.6}", last.t, last.global_loss);
            }
            println!("{}", serde_json::to_string(&out.eval.metrics).unwrap_or_default());
            for f in &out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Eval {
            common,
            model,
            checkpoint,
        } => {
            let cfg = load(&common)?;
            let opts = RunOptions {
                mode: model.mode,
                model: model.model,
                dataset: model.dataset,
                checkpoint,
                ..RunOptions::default()
            };
            let s = commands::eval(&cfg, &opts)?;
            println!("{}", serde_json::to_string(&s.metrics).unwrap_or_default());
        }
        Command::GradCheck {
            common,
            model,
            inject_fault,
        } => {
            let cfg = load(&common)?;
            let opts = RunOptions {
                model,
                inject_fault,
                ..RunOptions::default()
            };
            let s = commands::grad_check_cmd(&cfg, &opts)?;
            println!(
                "max relative error {:.3e} over {} scalars",
                s.report.max_rel_err, s.report.checked
            );
        }
        Command::Bound { common } => {
            let cfg = load(&common)?;
            let (s, _) = commands::bound(&cfg)?;
            println!(
                "A = {:.6}, gap {:.3e} -> {:.3e}, bound holds: {}",
                s.a, s.initial_gap, s.final_mean_gap, s.bound_holds
            );
        }
        Command::Compare { common, mode, dataset } => {
            let cfg = load(&common)?;
            let opts = RunOptions {
                mode,
                dataset,
                ..RunOptions::default()
            };
            let s = commands::compare(&cfg, &opts)?;
            println!(
                "cvnn {} params, rvnn {} params",
                s.cvnn.real_parameters, s.rvnn.real_parameters
            );
            println!("cvnn {}", serde_json::to_string(&s.cvnn.metrics).unwrap_or_default());
            println!("rvnn {}", serde_json::to_string(&s.rvnn.metrics).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
