//! Run configuration: one TOML file drives every command; every field except
//! the dataset path has a default, and the resolved config is echoed into
//! the output directory so any run can be reproduced without the original
//! flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Format, SplitPolicy};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("dataset.path is required (set it in the config file)")]
    MissingDatasetPath,
    #[error("noise level {0} outside [0, 1]")]
    BadNoiseLevel(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    /// Label carried into metrics reports.
    pub name: String,
    pub path: Option<PathBuf>,
    pub format: Format,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    pub split_policy: SplitPolicy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "dataset".into(),
            path: None,
            format: Format::MovielensTab,
            min_user_interactions: 0,
            min_item_interactions: 0,
            split_policy: SplitPolicy::Latest,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub noise_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { noise_levels: vec![0.1, 0.3, 0.5, 0.7, 0.9] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for &level in &self.eval.noise_levels {
            if !(0.0..=1.0).contains(&level) {
                return Err(ConfigError::BadNoiseLevel(level));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> Result<&Path, ConfigError> {
        self.dataset.path.as_deref().ok_or(ConfigError::MissingDatasetPath)
    }

    pub fn output_dir(&self) -> PathBuf {
        if self.output_dir.as_os_str().is_empty() {
            PathBuf::from("out")
        } else {
            self.output_dir.clone()
        }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.output_dir().join("split")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir().join("model.ckpt")
    }

    /// Write the fully resolved configuration next to the artifacts it
    /// produced.
    pub fn echo(&self) -> std::io::Result<PathBuf> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("resolved-config.toml");
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
