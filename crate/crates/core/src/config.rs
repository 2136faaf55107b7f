//! Run configuration: TOML file + dotted-key overrides on top of defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::fusion::ModelConfig;
use crate::loss::AdaptiveConfig;
use crate::mixture::FitOptions;
use crate::optim::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetPolicy {
    /// Fresh optimizer state at the warm-up / adaptive boundary.
    Reset,
    /// Carry the warm-up optimizer state into the adaptive stage.
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub warmup_epochs: usize,
    pub adaptive_steps: usize,
    pub adaptive_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// train / validation / test fractions
    pub split: [f64; 3],
    pub optimizer_policy: ResetPolicy,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub histogram_bins: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            warmup_epochs: 30,
            adaptive_steps: 4,
            adaptive_epochs: 10,
            batch_size: 64,
            seed: 1,
            split: [0.8, 0.1, 0.1],
            optimizer_policy: ResetPolicy::Reset,
            grad_clip: 5.0,
            histogram_bins: 40,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs == 0 {
            return Err(Error::config("schedule.warmup_epochs", "must be >= 1"));
        }
        if self.adaptive_steps == 0 {
            return Err(Error::config("schedule.adaptive_steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be >= 1"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("schedule.histogram_bins", "must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("schedule.grad_clip", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub threshold: f64,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            threshold: 0.5,
            epochs: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub adaptive: AdaptiveConfig,
    pub mixture: FitOptions,
    pub optimizer: OptimizerConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        self.adaptive.validate()?;
        self.mixture.validate()?;
        self.optimizer.validate()?;
        if !(0.0..=1.0).contains(&self.finetune.threshold) {
            return Err(Error::config("finetune.threshold", "must lie in [0, 1]"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }

    /// Sets both the data and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.schedule.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        check_known_keys(&table, &defaults, "")?;
        for (key, raw) in overrides {
            apply_override(&mut table, &defaults, key, raw)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml_str(&text, overrides)
    }
}

fn check_known_keys(table: &toml::Table, defaults: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match defaults.get(k) {
            None => return Err(Error::config(path, "unknown key")),
            Some(toml::Value::Table(d)) => match v {
                toml::Value::Table(t) => check_known_keys(t, d, &path)?,
                _ => return Err(Error::config(path, "expected a table")),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str, like: &toml::Value) -> toml::Value {
    // Parse as a TOML value; bare words become strings.
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, like) {
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(
    table: &mut toml::Table,
    defaults: &toml::Table,
    key: &str,
    raw: &str,
) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = table;
    let mut d = defaults;
    for (i, part) in parts.iter().enumerate() {
        let default = d
            .get(*part)
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        if i + 1 == parts.len() {
            if default.is_table() {
                return Err(Error::config(key, "cannot override a whole section"));
            }
            t.insert(part.to_string(), parse_override_value(raw, default));
            return Ok(());
        }
        let toml::Value::Table(dt) = default else {
            return Err(Error::config(key, "unknown key"));
        };
        d = dt;
        let entry = t
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, "expected a table"))?;
    }
    Ok(())
}
