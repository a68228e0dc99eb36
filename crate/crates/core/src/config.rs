//! Run configuration shared by every command.
//!
//! A JSON file with the fields of [`RunConfig`]; every field is optional and
//! unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{SplitSpec, DEFAULT_DURATIONS};
use crate::model::{ModelConfig, SubnetConfig, TrainConfig};
use crate::signal::TransformConfig;
use crate::sim::{PopulationSpec, SimConfig};

/// Grid-search domains for conv kernel sizes and filter counts.
pub const KERNEL_DOMAIN: [usize; 4] = [3, 5, 7, 9];
pub const FILTER_DOMAIN: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Nine conv blocks with the full filter counts.
    Full,
    /// Six blocks, a quarter of the filters, pool stride 2.
    #[default]
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub train_stride: usize,
    pub eval_stride: usize,
    pub enroll_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            train_stride: 1000,
            eval_stride: 250,
            enroll_stride: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub split: SplitSpec,
    pub iterations: usize,
    /// Length of each identification test stream (s).
    pub stream_seconds: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec {
                train: 6,
                enrolled: 3,
                impostors: 1,
            },
            iterations: 50,
            stream_seconds: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Explicit architecture; replaces the profile when set.
    pub model: Option<ModelConfig>,
    pub transform: TransformConfig,
    pub training: TrainConfig,
    pub windows: WindowConfig,
    /// Sampling rate assumed for CSV input without a manifest (Hz).
    pub rate: f64,
    pub durations: Vec<f64>,
    pub protocol: ProtocolConfig,
    pub sim: SimConfig,
    pub population: PopulationSpec,
    pub paths: PathsConfig,
    /// Skip grid-domain checks on `c`, `v_min`, kernels and filters.
    pub unsafe_hparams: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Reduced,
            model: None,
            transform: TransformConfig::default(),
            training: TrainConfig::default(),
            windows: WindowConfig::default(),
            rate: 1000.0,
            durations: DEFAULT_DURATIONS.to_vec(),
            protocol: ProtocolConfig::default(),
            sim: SimConfig::default(),
            population: PopulationSpec::default(),
            paths: PathsConfig::default(),
            unsafe_hparams: false,
        }
    }
}

fn check_subnet(name: &str, cfg: &SubnetConfig, filters_too: bool) -> Result<(), ConfigError> {
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        if !KERNEL_DOMAIN.contains(&b.kernel) {
            return Err(ConfigError::Invalid(format!(
                "{name} block {}: kernel {} not in {KERNEL_DOMAIN:?}",
                i + 1,
                b.kernel
            )));
        }
        if filters_too && !FILTER_DOMAIN.contains(&b.filters) {
            return Err(ConfigError::Invalid(format!(
                "{name} block {}: {} filters not in {FILTER_DOMAIN:?}",
                i + 1,
                b.filters
            )));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.profile {
            Profile::Full => ModelConfig::full(),
            Profile::Reduced => ModelConfig::reduced(),
        })
    }

    /// Structural checks always; grid-domain checks unless
    /// `unsafe_hparams`. The built-in reduced profile divides filter counts
    /// below the grid on purpose, so only its kernels are checked.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.transform.validate(self.unsafe_hparams).map_err(|e| invalid(&e))?;
        let model = self.model_config();
        model.slow.validate().map_err(|e| invalid(&e))?;
        model.fast.validate().map_err(|e| invalid(&e))?;
        if !self.unsafe_hparams {
            let filters_too = self.model.is_some() || self.profile == Profile::Full;
            check_subnet("slow", &model.slow, filters_too)?;
            check_subnet("fast", &model.fast, filters_too)?;
        }
        self.training.validate().map_err(|e| invalid(&e))?;
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(ConfigError::Invalid(format!("rate must be positive, got {}", self.rate)));
        }
        let w = &self.windows;
        if w.train_stride == 0 || w.eval_stride == 0 || w.enroll_stride == 0 {
            return Err(ConfigError::Invalid("window strides must be positive".into()));
        }
        if self.durations.is_empty() || self.durations.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(ConfigError::Invalid(format!(
                "durations must be positive, got {:?}",
                self.durations
            )));
        }
        self.sim.validate().map_err(|e| invalid(&e))?;
        self.population.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}
