//! One-step-ahead cardiac forecasting with a frozen encoder and a resampled
//! ensemble of heads whose disagreement scores each day.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamCheckpoint;
use crate::datamodel::{make_windows, DataError, NormalizedDay, Split, CARDIAC_DIM, INPUT_DIM};
use crate::encoder::{EncoderConfig, PositionalMode};
use crate::training::{
    derive_seed, train_backbone, train_ensemble, Backbone, Ensemble, EnsembleConfig, EnsembleOutput, EnsembleRecord,
    HeadTask, SequenceSet, Target, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint bundle mismatch: {0}")]
    Bundle(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub window_size: usize,
    pub stride: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            window_size: 24,
            stride: 12,
            encoder: EncoderConfig {
                positional_mode: PositionalMode::Sinusoidal,
                ..Default::default()
            },
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowKey {
    pub date_index: i64,
    pub start: usize,
}

/// Windows that have a cardiac target, with their targets.
#[derive(Clone, Debug)]
pub struct ForecastData {
    pub inputs: SequenceSet,
    pub targets: Target,
    pub keys: Vec<WindowKey>,
}

pub fn forecast_data(days: &[NormalizedDay], window_size: usize, stride: usize) -> Result<ForecastData, DataError> {
    let mut inputs = SequenceSet::new(window_size, INPUT_DIM);
    let mut targets = Target::new(CARDIAC_DIM);
    let mut keys = Vec::new();
    for day in days {
        for w in make_windows(day, window_size, stride)? {
            let Some(c) = w.cardiac_target else { continue };
            inputs.push(&w.inputs);
            targets.values.extend(c.iter().map(|&v| v as f32));
            keys.push(WindowKey {
                date_index: w.date_index,
                start: w.start,
            });
        }
    }
    Ok(ForecastData { inputs, targets, keys })
}

const HEAD: &str = "forecast";

/// Phase-1 result: encoder and its single forecasting head.
#[derive(Clone, Debug)]
pub struct Phase1 {
    pub backbone: Backbone,
    pub losses: Vec<f64>,
}

/// Minimizes the batch-mean squared error of the next-slot cardiac vector.
pub fn train_phase1(data: &ForecastData, cfg: &ForecastConfig, seed: u64) -> Result<Phase1, ForecastError> {
    if data.keys.is_empty() {
        return Err(TrainError::EmptyTrainingSet.into());
    }
    let mut backbone = Backbone::new(
        cfg.encoder,
        INPUT_DIM,
        &[(HEAD, CARDIAC_DIM)],
        cfg.ensemble.hidden,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let tasks = [HeadTask {
        head: &backbone.heads[0],
        target: &data.targets,
        weight: 1.0,
    }];
    let losses = train_backbone(
        &mut backbone.store,
        &backbone.encoder,
        &tasks,
        &data.inputs,
        &cfg.train,
        &mut rng,
    )?;
    Ok(Phase1 { backbone, losses })
}

/// Seeds of one training unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSeeds {
    pub backbone: u64,
    pub order: u64,
    pub heads: Vec<u64>,
}

impl UnitSeeds {
    pub fn derive(seed: u64, k: usize) -> Self {
        Self {
            backbone: derive_seed(seed, 0),
            order: derive_seed(seed, 100),
            heads: (0..k as u64).map(|i| derive_seed(seed, 200 + i)).collect(),
        }
    }
}

/// Trained forecaster: encoder (frozen after phase 1) and the ensemble.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub config: ForecastConfig,
    pub seeds: UnitSeeds,
    pub backbone: Backbone,
    pub ensemble: Ensemble,
    pub phase1_losses: Vec<f64>,
}

/// Phase 1 on training windows, then the ensemble on frozen embeddings.
pub fn fit_forecaster(days: &[NormalizedDay], cfg: &ForecastConfig, seed: u64) -> Result<ForecastModel, ForecastError> {
    let train: Vec<NormalizedDay> = days.iter().filter(|d| d.split == Split::Train).cloned().collect();
    let data = forecast_data(&train, cfg.window_size, cfg.stride)?;
    let seeds = UnitSeeds::derive(seed, cfg.ensemble.k);
    let phase1 = train_phase1(&data, cfg, seeds.backbone)?;
    let z = phase1.backbone.embed_all(&data.inputs)?;
    let ensemble = train_ensemble(&z, &data.targets, &cfg.ensemble, &cfg.train, &seeds.heads, seeds.order)?;
    Ok(ForecastModel {
        config: cfg.clone(),
        seeds,
        backbone: phase1.backbone,
        ensemble,
        phase1_losses: phase1.losses,
    })
}

/// Arithmetic mean of the window scores; `None` for an empty day.
pub fn daily_uncertainty(u: &[f64]) -> Option<f64> {
    (!u.is_empty()).then(|| u.iter().sum::<f64>() / u.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayUncertainty {
    pub date_index: i64,
    /// `None` when no window of the day could be scored.
    pub value: Option<f64>,
    pub windows: usize,
}

/// Groups window scores by day, preserving the order of `days`.
pub(crate) fn group_by_day(days: &[NormalizedDay], keys: &[WindowKey], u: &[f64]) -> Vec<DayUncertainty> {
    let mut out: Vec<(i64, Vec<f64>)> = days.iter().map(|d| (d.date_index, Vec::new())).collect();
    let pos: std::collections::HashMap<i64, usize> = days.iter().enumerate().map(|(i, d)| (d.date_index, i)).collect();
    for (k, &v) in keys.iter().zip(u) {
        out[pos[&k.date_index]].1.push(v);
    }
    out.into_iter()
        .map(|(date_index, v)| DayUncertainty {
            date_index,
            value: daily_uncertainty(&v),
            windows: v.len(),
        })
        .collect()
}

impl ForecastModel {
    /// Ensemble output for every targetable window of `days`.
    pub fn window_outputs(
        &self,
        days: &[NormalizedDay],
    ) -> Result<(Vec<WindowKey>, Vec<EnsembleOutput>), ForecastError> {
        let data = forecast_data(days, self.config.window_size, self.config.stride)?;
        if data.keys.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let z = self.backbone.embed_all(&data.inputs)?;
        Ok((data.keys, self.ensemble.stats(&z)?))
    }

    /// Day-level uncertainty `U_d` for each day.
    pub fn score_days(&self, days: &[NormalizedDay]) -> Result<Vec<DayUncertainty>, ForecastError> {
        let (keys, out) = self.window_outputs(days)?;
        let u: Vec<f64> = out.iter().map(|o| o.u).collect();
        Ok(group_by_day(days, &keys, &u))
    }

    pub fn to_bundle(&self) -> ForecastBundle {
        ForecastBundle {
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            input_dim: INPUT_DIM,
            backbone: ParamCheckpoint::from_store(&self.backbone.store),
            ensemble: EnsembleRecord::new(
                HEAD,
                &self.ensemble,
                self.config.encoder.d_model,
                self.config.ensemble.hidden,
                self.seeds.order,
            ),
            phase1_losses: self.phase1_losses.clone(),
        }
    }

    pub fn from_bundle(b: &ForecastBundle) -> Result<Self, ForecastError> {
        if b.input_dim != INPUT_DIM {
            return Err(ForecastError::Bundle(format!(
                "input_dim {} != {INPUT_DIM}",
                b.input_dim
            )));
        }
        let backbone = Backbone::load(
            b.config.encoder,
            b.input_dim,
            &[(HEAD, CARDIAC_DIM)],
            b.config.ensemble.hidden,
            &b.backbone,
        )?;
        Ok(Self {
            config: b.config.clone(),
            seeds: b.seeds.clone(),
            backbone,
            ensemble: b.ensemble.restore()?,
            phase1_losses: b.phase1_losses.clone(),
        })
    }
}

/// Checkpoint bundle: configuration, seeds, encoder and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub config: ForecastConfig,
    pub seeds: UnitSeeds,
    pub input_dim: usize,
    pub backbone: ParamCheckpoint,
    pub ensemble: EnsembleRecord,
    pub phase1_losses: Vec<f64>,
}
