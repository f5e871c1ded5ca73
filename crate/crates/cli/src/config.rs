//! Experiment configuration: one JSON document, defaults from the reference
//! hyperparameter table, `--set key=value` overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use cvfl_core::convergence::{BoundConstants, ToyConfig};
use cvfl_core::csisim::SceneConfig;
use cvfl_core::cvnn::{Activation, NetConfig};
use cvfl_core::federated::{AggregationMode, FedConfig, MaskPolicy};
use cvfl_core::losses::LossConfig;
use cvfl_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Network under test. Independent of `net` so the check stays cheap.
    pub net: NetConfig,
    pub batch: usize,
    pub step: f64,
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            net: NetConfig {
                antennas: 2,
                subcarriers: 16,
                conv1_channels: 2,
                conv1_kernel: 2,
                pool1_window: 3,
                pool1_stride: 1,
                conv2_channels: 2,
                conv2_kernel: 2,
                pool2_window: 3,
                pool2_stride: 2,
                fc1_units: 4,
                fc2_units: 3,
                activation: Activation::Crelu,
                ..NetConfig::default()
            },
            batch: 4,
            step: 1e-6,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub toy: ToyConfig,
    pub rounds: usize,
    pub seeds: usize,
    /// Per-client probability of sending the real half.
    pub p_r: f64,
    /// Per-client probability of sending the imaginary half.
    pub p_m: f64,
    pub aggregation: AggregationMode,
    /// Replaces the fitted constants when given.
    pub constants: Option<BoundConstants>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            rounds: 60,
            seeds: 20,
            p_r: 1.0,
            p_m: 1.0,
            aggregation: AggregationMode::Weighted,
            constants: None,
        }
    }
}

impl BoundConfig {
    pub fn mask_policy(&self) -> MaskPolicy {
        if self.p_r == 1.0 && self.p_m == 1.0 {
            MaskPolicy::AlwaysFull
        } else {
            MaskPolicy::Bernoulli {
                p_r: self.p_r,
                p_m: self.p_m,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scene: SceneConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub fed: FedConfig,
    pub loss: LossConfig,
    pub output_dir: PathBuf,
    pub formats: Vec<Format>,
    pub grad_check: GradCheckConfig,
    pub bound: BoundConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: SceneConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            fed: FedConfig::default(),
            loss: LossConfig::default(),
            output_dir: PathBuf::from("out"),
            formats: vec![Format::Csv],
            grad_check: GradCheckConfig::default(),
            bound: BoundConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::config(e.to_string())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from the defaults), applies `--set` overrides
    /// in order, then validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let base: Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let cfg: Self = serde_json::from_value(base).map_err(config_err)?;
        let cfg = cfg.with_overrides(sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(self, sets: &[String]) -> Result<Self, CliError> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut v = serde_json::to_value(&self).map_err(config_err)?;
        for s in sets {
            apply_set(&mut v, s)?;
        }
        serde_json::from_value(v).map_err(config_err)
    }

    /// One seed for every random stream of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.net.seed = seed;
        self.train.seed = seed;
        self.fed.seed = seed;
        self.grad_check.net.seed = seed;
        self.bound.toy.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scene.validate().map_err(config_err)?;
        self.net.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        self.fed.validate(self.train.iterations).map_err(config_err)?;
        self.loss.validate().map_err(config_err)?;
        if self.net.antennas != self.scene.antennas || self.net.subcarriers != self.scene.subcarriers {
            return Err(CliError::config(format!(
                "net input {}x{} does not match scene {} antennas x {} subcarriers",
                self.net.antennas, self.net.subcarriers, self.scene.antennas, self.scene.subcarriers
            )));
        }
        if self.fed.clients != self.scene.user_count {
            return Err(CliError::config(format!(
                "fed.clients = {} but the scene has {} users",
                self.fed.clients, self.scene.user_count
            )));
        }
        if self.formats.is_empty() {
            return Err(CliError::config("formats must name at least one of csv, jsonl"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::config("output_dir is empty"));
        }

        let g = &self.grad_check;
        g.net.validate().map_err(config_err)?;
        if g.batch == 0 || !(g.step > 0.0) || !(g.tol > 0.0) {
            return Err(CliError::config("grad_check needs batch >= 1, step > 0 and tol > 0"));
        }

        let b = &self.bound;
        if b.rounds == 0 || b.seeds == 0 {
            return Err(CliError::config("bound.rounds and bound.seeds must be at least 1"));
        }
        for (name, p) in [("p_r", b.p_r), ("p_m", b.p_m)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::config(format!("bound.{name} = {p} outside [0, 1]")));
            }
        }
        if b.toy.clients == 0 || b.toy.rows_per_client == 0 || b.toy.dim == 0 {
            return Err(CliError::config(
                "bound.toy needs clients, rows_per_client and dim >= 1",
            ));
        }
        if let Some(c) = &b.constants {
            c.validate().map_err(config_err)?;
        }
        Ok(())
    }
}

/// `a.b.c=value`, where value is JSON if it parses and a string otherwise.
/// The key must already exist in the fully expanded config.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(CliError::config(format!("--set {key}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Err(CliError::config("--set with an empty key"))
}
