//! Versioned JSON experiment documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::experiments::{GravityRecipe, SweepConfig, TemporalConfig};
use crate::training::{RnnConfig, TrainConfig};
use crate::transformer::{ModelBudget, ModelOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { found: u32 },
}

/// Where a run writes its artifacts. Every field is optional so that
/// command-line flags can fill or override them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    /// JSON-lines record store (appended).
    pub records: Option<PathBuf>,
    /// JSON-lines wall-time store (appended).
    pub timings: Option<PathBuf>,
    pub summary_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Transformer {
        budget: ModelBudget,
        #[serde(default)]
        options: ModelOptions,
    },
    Rnn {
        #[serde(default)]
        config: RnnConfig,
    },
}

/// A single training run on dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub model: ModelSpec,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Experiment {
    Train(TrainJob),
    Sweep(SweepConfig),
    Table1(TemporalConfig),
    Gravity(GravityRecipe),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Train(_) => "train",
            Experiment::Sweep(_) => "sweep",
            Experiment::Table1(_) => "table1",
            Experiment::Gravity(_) => "gravity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub output: OutputPaths,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            version: CONFIG_VERSION,
            experiment,
            output: OutputPaths::default(),
        }
    }

    /// Parses and checks the schema version; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: probe.version });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
