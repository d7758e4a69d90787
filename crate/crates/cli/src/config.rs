//! Run configuration: a TOML file with dotted-section overrides.
//!
//! Precedence is defaults ← file values ← --set overrides. Unknown keys are
//! rejected, every field is validated before any output file is written,
//! and the fully resolved configuration is written next to each run's
//! outputs so the run can be replayed bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use picogrpo::data::PromptSpec;
use picogrpo::error::{Error, Result};
use picogrpo::membudget::BudgetInputs;
use picogrpo::model::{GenConfig, ModelConfig};
use picogrpo::trainer::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompt: PromptSpec,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompt: PromptSpec::default(),
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training dataset (line-delimited records).
    pub train_path: Option<String>,
    /// Evaluation dataset.
    pub eval_path: Option<String>,
    /// Few-shot pool for evaluation; falls back to train_path.
    pub pool_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub gen: GenConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub budget: BudgetInputs,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.gen.validate()?;
        self.eval.prompt.validate()?;
        if self.eval.workers == 0 {
            return Err(Error::config("eval.workers must be at least 1"));
        }
        self.budget.validate()
    }

    /// The resolved snapshot written next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // try the value as a TOML literal; fall back to a plain string
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::config(format!("override {spec:?} is not of the form key.path=value"))
    })?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key {path:?} is malformed")));
    }
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!("override {path:?}: {key} is not a table"))
            })?;
    }
    current.insert(
        keys[keys.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

/// Loads a config file (if any), applies --set overrides in order, and
/// deserializes into a fully validated [`RunConfig`].
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse().map_err(|e| {
                Error::config(format!("config {}: {e}", path.display()))
            })?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
