use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drt_core::model::ModelConfig;
use drt_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Explicit(ModelConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("toy".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let c = match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name)?,
            ModelSpec::Explicit(c) => c.clone(),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Induction,
    Text,
    Domains,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Models {
    #[default]
    Routed,
    Baseline,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InductionParams {
    pub n_seqs: usize,
    pub pattern_len: usize,
}

impl Default for InductionParams {
    fn default() -> Self {
        Self {
            n_seqs: 20_000,
            pattern_len: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    #[serde(default)]
    pub text: Option<PathBuf>,
    #[serde(default)]
    pub domains: BTreeMap<String, PathBuf>,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub corpus: CorpusPaths,
    #[serde(default)]
    pub induction: InductionParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub models: Models,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            train: None,
            task: Task::default(),
            corpus: CorpusPaths::default(),
            induction: InductionParams::default(),
            seed: 0,
            precision: Precision::default(),
            models: Models::default(),
            out_dir: default_out(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                field: if path.is_empty() || path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Training settings, falling back to the task's defaults.
    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| match self.task {
            Task::Induction => TrainConfig::induction(),
            _ => TrainConfig::default(),
        })
    }
}

/// `DRT_SEED` when set, else `fallback`.
pub fn env_seed(fallback: u64) -> Result<u64, CliError> {
    match std::env::var("DRT_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config {
            field: "DRT_SEED".into(),
            message: format!("`{v}` is not an unsigned integer"),
        }),
        Err(_) => Ok(fallback),
    }
}
