//! Experiment configuration: defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use msis_core::baselines::BaselineKind;
use msis_core::loss::LossConfig;
use msis_core::model::{MlpConfig, MsisConfig};
use msis_core::sim::SimConfig;
use msis_core::trainer::TrainConfig;
use msis_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CONFIG_ENV: &str = "MSIS_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `examples.csv` and optionally
    /// `counterfactuals.csv`; when absent, data is simulated from `sim`.
    pub data: Option<PathBuf>,
    /// Parent of all run directories.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            output: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrids {
    pub d: Vec<usize>,
    pub gamma: Vec<f64>,
}

impl Default for SweepGrids {
    fn default() -> Self {
        Self {
            d: vec![2, 4, 8, 16, 24],
            gamma: vec![0.0, 1.5e-4, 3e-4, 6e-4, 1.2e-3, 2.4e-3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            step: 1e-6,
            tolerance: 1e-4,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub model: MsisConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    /// Baselines trained next to MSIS; the first one is the reference
    /// for reported gains.
    pub baselines: Vec<BaselineKind>,
    pub baseline_hidden: Vec<usize>,
    /// Seed of the train/validation shuffle.
    pub split_seed: u64,
    pub sweep: SweepGrids,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            model: MsisConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            baselines: vec![BaselineKind::SingleTask],
            baseline_hidden: MlpConfig::default().hidden,
            split_seed: 0,
            sweep: SweepGrids::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> msis_core::Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.paths.data.is_none() && self.model.input_dim != self.sim.feature_dim {
            return Err(Error::config(
                "model.input_dim",
                format!("is {} but sim.feature_dim is {}", self.model.input_dim, self.sim.feature_dim),
            ));
        }
        if self.baseline_hidden.contains(&0) {
            return Err(Error::config("baseline_hidden", "layer widths must be positive"));
        }
        if self.sweep.d.is_empty() || self.sweep.d.contains(&0) {
            return Err(Error::config("sweep.d", "needs positive widths"));
        }
        if self.sweep.gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::config("sweep.gamma", "needs finite non-negative values"));
        }
        let gc = &self.gradcheck;
        if gc.batch_size == 0 {
            return Err(Error::config("gradcheck.batch_size", "must be positive"));
        }
        if !(gc.step > 0.0 && gc.tolerance > 0.0) {
            return Err(Error::config("gradcheck.step", "step and tolerance must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn baseline_name(&self) -> String {
        self.baselines
            .first()
            .map(|b| b.name().to_string())
            .unwrap_or_else(|| "single_task".into())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `key.path=value`; the value is JSON when it parses, a string otherwise.
pub fn parse_override(text: &str) -> anyhow::Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .with_context(|| format!("override `{text}` is not of the form key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut slot = root;
    for part in path.split('.') {
        if !slot.is_object() {
            *slot = Value::Object(Default::default());
        }
        slot = slot
            .as_object_mut()
            .expect("object")
            .entry(part.to_string())
            .or_insert(Value::Null);
    }
    *slot = value;
}

/// Resolves the configuration: defaults < `file` < `overrides`.
pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| {
            Error::config("<file>", format!("{}: {e}", path.display()))
        })?;
        if !parsed.is_object() {
            return Err(Error::config("<file>", "top level must be an object").into());
        }
        merge(&mut value, parsed);
    }
    for (k, v) in overrides {
        set_path(&mut value, k, v.clone());
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}
