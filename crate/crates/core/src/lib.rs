//! Relapse detection from wearable time series: data model, autodiff,
//! Transformer encoder, ensemble uncertainty pipelines, scoring and fusion.

pub mod autodiff;
pub mod config;
pub mod datamodel;
pub mod encoder;
pub mod forecasting;
pub mod heads;
pub mod multitask;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod training;

pub use config::{ConfigError, DataSource, ExperimentConfig, FusionKind};
pub use datamodel::{DataError, DayRecord, Label, SlotFeatures, Split};
pub use encoder::{EncoderConfig, PositionalMode};
pub use pipeline::{Experiment, MetricsReport, PipelineError, PipelineKind};
pub use scoring::{FusionMode, HealthyDistribution};
