//! JSON experiment configuration with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_corpus, synth_corpus, PartitionSpec, PartitionStrategy, Record};
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::runner::GridCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV with `text` and `label` columns; relative paths resolve against
    /// the working directory.
    Csv { path: PathBuf },
    /// Generated keyword corpus of `n` balanced records.
    Synthetic { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub partition: PartitionStrategy,
    /// Fraction held out, both for the global eval set and inside each
    /// client shard.
    #[serde(default = "default_eval_frac")]
    pub eval_frac: f64,
}

fn default_eval_frac() -> f64 {
    0.2
}

/// Grid and seeds for the `ablate` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// `[K, E, R]` triples.
    pub grid: Vec<GridCell>,
    /// Base seeds; empty means `fed.seed` only.
    pub seeds: Vec<u64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub fed: FedConfig,
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// Reads a JSON config, applies `key=value` overrides and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate(&self.model)?;
        self.fed.validate()?;
        if !(self.data.eval_frac > 0.0 && self.data.eval_frac < 1.0) {
            return Err(Error::Config(format!(
                "data.eval_frac must lie in (0, 1), got {}",
                self.data.eval_frac
            )));
        }
        self.partition_spec()
            .validate()
            .map_err(|e| Error::Config(format!("data.partition: {e}")))?;
        match &self.data.source {
            DataSource::Csv { path } if !path.is_file() => Err(Error::Config(format!(
                "data.source.path: {} does not exist",
                path.display()
            ))),
            DataSource::Synthetic { n, .. } if *n < 2 => {
                Err(Error::Config("data.source.n must be >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    /// Partition over `fed.clients` clients, seeded by `fed.seed`.
    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            clients: self.fed.clients,
            strategy: self.data.partition.clone(),
            seed: self.fed.seed,
        }
    }

    pub fn load_records(&self) -> Result<Vec<Record>> {
        match &self.data.source {
            DataSource::Csv { path } => load_corpus(path),
            DataSource::Synthetic { n, seed } => synth_corpus(*n, *seed),
        }
    }

    /// Sets every seed (model, LoRA, federation, synthetic data) to `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.lora.seed = seed;
        self.fed.seed = seed;
        if let DataSource::Synthetic { seed: s, .. } = &mut self.data.source {
            *s = seed;
        }
    }
}

/// Applies one `dotted.path=value` override to a JSON document. The value is
/// parsed as JSON when possible and taken as a string otherwise. Missing
/// intermediate objects are created; unknown leaves are caught later by
/// deserialization.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("{} is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is non-empty")
}
