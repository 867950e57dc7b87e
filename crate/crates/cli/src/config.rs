//! The run configuration file and the flags that override it.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use aresunet::blocks::NormKind;
use aresunet::data::{AugmentationPlan, WindowingSpec};
use aresunet::model::ModelConfig;
use aresunet::tensor::Precision;
use aresunet::train::TrainConfig;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

/// A configuration problem; reported with exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Synth,
    #[default]
    Train,
    Eval,
    Predict,
    Ablate,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `<id>.img.*` / `<id>.msk.*` volume pairs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Share of whole volumes used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_fraction: 0.9,
        }
    }
}

/// Everything a run needs. Serialized as TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    /// Output directory.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub windowing: WindowingSpec,
    pub augmentation: AugmentationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: CommandKind::default(),
            out: PathBuf::from("runs/latest"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            windowing: WindowingSpec::default(),
            augmentation: AugmentationPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError::new("config", e.message().to_string()).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every section, including the cross-section rule that windows
    /// match the model's input depth.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.norm_kind)?;
        self.windowing.validate()?;
        self.augmentation.validate()?;
        if self.windowing.depth != self.model.input_shape[0] {
            return Err(ConfigError::new(
                "windowing.depth",
                format!(
                    "must equal the model input depth {}, got {}",
                    self.model.input_shape[0], self.windowing.depth
                ),
            )
            .into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(ConfigError::new("data.train_fraction", "must lie in (0, 1]").into());
        }
        Ok(())
    }

    /// The dataset directory, which must exist.
    pub fn data_dir(&self) -> anyhow::Result<&Path> {
        let dir = self
            .data
            .dir
            .as_deref()
            .ok_or_else(|| ConfigError::new("data.dir", "no dataset directory given (use --data)"))?;
        if !dir.is_dir() {
            return Err(ConfigError::new("data.dir", format!("{} is not a directory", dir.display())).into());
        }
        Ok(dir)
    }
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds model initialization, shuffling, splitting and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub norm: Option<NormKind>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    /// The config file (or defaults) with these flags applied.
    pub fn resolve(&self, command: CommandKind) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        c.command = command;
        if let Some(seed) = self.seed {
            c.model.seed = seed;
            c.train.seed = seed;
            c.augmentation.seed = seed;
        }
        if let Some(norm) = self.norm {
            c.model.norm_kind = norm;
        }
        if let Some(levels) = self.levels {
            c.model.levels = levels;
        }
        if let Some(base) = self.base_channels {
            c.model.base_channels = base;
        }
        if let Some(lr) = self.lr {
            c.train.lr = lr;
        }
        if let Some(epochs) = self.epochs {
            c.train.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            c.train.batch_size = batch;
        }
        if let Some(p) = &self.precision {
            c.model.precision = if p == "32" { Precision::F32 } else { Precision::F64 };
        }
        if let Some(dir) = &self.data {
            c.data.dir = Some(dir.clone());
        }
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        Ok(c)
    }
}
