//! Experiment configuration, validation and hashing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::window_count;
use crate::forecasting::ForecastConfig;
use crate::multitask::MultitaskConfig;
use crate::scoring::{default_alpha_grid, default_tau_grid, Aggregation};
use crate::synth::SynthConfig;

/// A configuration problem tied to one field path.
#[derive(Debug, Error, PartialEq)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl ToString) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthConfig),
    /// Slot table and day sidecar in the datamodel CSV formats.
    Csv {
        slots: PathBuf,
        sidecar: PathBuf,
    },
    /// Tables already under the run's `data/` directory, e.g. from `import-raw`.
    Run,
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synth(SynthConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineTaus {
    pub forecast: f64,
    pub multitask: f64,
}

impl Default for PipelineTaus {
    fn default() -> Self {
        Self {
            forecast: -0.1,
            multitask: -0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Weighted,
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Mode written to the fused-score table.
    pub mode: FusionKind,
    /// Fixed weight; searched on validation when absent.
    pub alpha: Option<f64>,
    /// Fixed fused threshold; searched on validation when absent.
    pub tau: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionKind::Weighted,
            alpha: None,
            tau: None,
            alpha_grid: default_alpha_grid(),
            tau_grid: default_tau_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub forecast: ForecastConfig,
    pub multitask: MultitaskConfig,
    pub tau: PipelineTaus,
    pub fusion: FusionConfig,
    pub aggregation: Aggregation,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            forecast: ForecastConfig::default(),
            multitask: MultitaskConfig::default(),
            tau: PipelineTaus::default(),
            fusion: FusionConfig::default(),
            aggregation: Aggregation::PerPatient,
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Defaults with a single seed.
    pub fn smoke() -> Self {
        Self {
            seeds: vec![0],
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::new(json_path(&e), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form with the output directory cleared,
    /// so relocated runs share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let DataSource::Synth(s) = &self.data {
            if s.profiles.is_empty() {
                return Err(ConfigError::new("data.profiles", "at least one profile is required"));
            }
            for (i, p) in s.profiles.iter().enumerate() {
                p.validate()
                    .map_err(|e| ConfigError::new(format!("data.profiles[{i}]"), e))?;
            }
            if s.n_train < 2 || s.n_test == 0 {
                return Err(ConfigError::new(
                    "data.n_train",
                    "need at least 2 training and 1 test day",
                ));
            }
        }
        let f = &self.forecast;
        window_count(f.window_size, f.stride).map_err(|e| ConfigError::new("forecast.window_size", e))?;
        f.encoder
            .validate()
            .map_err(|e| ConfigError::new("forecast.encoder", e))?;
        f.train.validate().map_err(|e| ConfigError::new("forecast.train", e))?;
        f.ensemble
            .validate()
            .map_err(|e| ConfigError::new("forecast.ensemble", e))?;
        let m = &self.multitask;
        window_count(m.window_size, m.stride).map_err(|e| ConfigError::new("multitask.window_size", e))?;
        m.encoder
            .validate()
            .map_err(|e| ConfigError::new("multitask.encoder", e))?;
        m.train.validate().map_err(|e| ConfigError::new("multitask.train", e))?;
        m.ensemble
            .validate()
            .map_err(|e| ConfigError::new("multitask.ensemble", e))?;
        for (name, w) in [
            ("multitask.sleep_loss_weight", m.sleep_loss_weight),
            ("multitask.time_variance_weight", m.time_variance_weight),
            ("multitask.sleep_variance_weight", m.sleep_variance_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(ConfigError::new(name, "must be finite and non-negative"));
            }
        }
        for (name, t) in [
            ("tau.forecast", self.tau.forecast),
            ("tau.multitask", self.tau.multitask),
        ] {
            if !t.is_finite() {
                return Err(ConfigError::new(name, "must be finite"));
            }
        }
        let fu = &self.fusion;
        if let Some(a) = fu.alpha.filter(|a| !(0.0..=1.0).contains(a)) {
            return Err(ConfigError::new("fusion.alpha", format!("{a} outside [0, 1]")));
        }
        if fu.alpha_grid.is_empty() || fu.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ConfigError::new("fusion.alpha_grid", "must be non-empty within [0, 1]"));
        }
        if fu.tau_grid.is_empty() || fu.tau_grid.iter().any(|t| !t.is_finite()) {
            return Err(ConfigError::new("fusion.tau_grid", "must be non-empty and finite"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(ConfigError::new("seeds", "seeds must be distinct"));
        }
        Ok(())
    }
}

fn json_path(e: &serde_json::Error) -> String {
    format!("<json line {} column {}>", e.line(), e.column())
}
