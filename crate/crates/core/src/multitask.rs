//! Multi-task pipeline: predicts the measurement-time embedding of each
//! window with an auxiliary sleep-embedding head, then scores days by the
//! weighted ensemble variance of both heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamCheckpoint;
use crate::datamodel::{make_windows, time_embedding, DataError, NormalizedDay, Split, INPUT_DIM, MINUTES_PER_DAY};
use crate::encoder::{EncoderConfig, PositionalMode};
use crate::forecasting::{daily_uncertainty, UnitSeeds, WindowKey};
use crate::training::{
    derive_seed, train_backbone, train_ensemble, Backbone, Ensemble, EnsembleConfig, EnsembleRecord, HeadTask,
    SequenceSet, Target, TrainConfig, TrainError,
};

/// Physiological channels, masks and the two sleep embeddings.
pub const MULTITASK_INPUT_DIM: usize = INPUT_DIM + 4;
pub const TIME_DIM: usize = 2;
pub const SLEEP_DIM: usize = 4;
const TIME_HEAD: &str = "time";
const SLEEP_HEAD: &str = "sleep";

#[derive(Debug, Error)]
pub enum MultitaskError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint bundle mismatch: {0}")]
    Bundle(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultitaskConfig {
    pub window_size: usize,
    pub stride: usize,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    /// Training weight λ of the sleep loss.
    pub sleep_loss_weight: f64,
    /// Inference weights of the combined day variance.
    pub time_variance_weight: f64,
    pub sleep_variance_weight: f64,
}

impl Default for MultitaskConfig {
    fn default() -> Self {
        Self {
            window_size: 24,
            stride: 24,
            encoder: EncoderConfig {
                positional_mode: PositionalMode::Alibi,
                ..Default::default()
            },
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            sleep_loss_weight: 1.0,
            time_variance_weight: 0.7,
            sleep_variance_weight: 0.3,
        }
    }
}

/// Typical sleep onset and wake of a patient's training days.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SleepMedians {
    pub onset_min: f64,
    pub wake_min: f64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Medians over annotated training days. Onsets are taken on a clock that
/// starts at noon so that evening and after-midnight onsets stay adjacent.
pub fn sleep_medians(days: &[NormalizedDay]) -> Option<SleepMedians> {
    let annotated = days
        .iter()
        .filter(|d| d.split == Split::Train)
        .filter_map(|d| Some((d.sleep_onset_min?, d.wake_min?)));
    let (onsets, wakes): (Vec<f64>, Vec<f64>) = annotated
        .map(|(on, wake)| ((on + MINUTES_PER_DAY / 2.0) % MINUTES_PER_DAY, wake))
        .unzip();
    let onset = (median(onsets)? + MINUTES_PER_DAY / 2.0) % MINUTES_PER_DAY;
    Some(SleepMedians {
        onset_min: onset,
        wake_min: median(wakes)?,
    })
}

#[derive(Clone, Debug)]
pub struct MultitaskData {
    pub inputs: SequenceSet,
    pub time: Target,
    /// Weighted by the day's sleep-annotation mask.
    pub sleep: Target,
    pub keys: Vec<WindowKey>,
}

/// Stream 1 is the slot channels with masks; stream 2 is the median sleep
/// embeddings appended to every timestep.
pub fn build_streams(
    days: &[NormalizedDay],
    medians: Option<SleepMedians>,
    window_size: usize,
    stride: usize,
) -> Result<MultitaskData, DataError> {
    let extra = match medians {
        Some(m) => {
            let (a, b) = (time_embedding(m.onset_min)?, time_embedding(m.wake_min)?);
            [a.sin_component, a.cos_component, b.sin_component, b.cos_component]
        }
        None => [0.0; 4],
    };
    let mut inputs = SequenceSet::new(window_size, MULTITASK_INPUT_DIM);
    let mut time = Target::new(TIME_DIM);
    let mut sleep = Target::new(SLEEP_DIM);
    let mut mask = Vec::new();
    let mut keys = Vec::new();
    let mut row = Vec::with_capacity(window_size * MULTITASK_INPUT_DIM);
    for day in days {
        for w in make_windows(day, window_size, stride)? {
            row.clear();
            for slot in w.inputs.chunks(INPUT_DIM) {
                row.extend_from_slice(slot);
                row.extend_from_slice(&extra);
            }
            inputs.push(&row);
            time.values.extend(w.time_target.to_array().map(|v| v as f32));
            match w.sleep_target {
                Some([on, wake]) => {
                    sleep
                        .values
                        .extend(on.to_array().into_iter().chain(wake.to_array()).map(|v| v as f32));
                    mask.push(1.0);
                }
                None => {
                    sleep.values.extend([0.0; SLEEP_DIM]);
                    mask.push(0.0);
                }
            }
            keys.push(WindowKey {
                date_index: w.date_index,
                start: w.start,
            });
        }
    }
    sleep.weights = Some(mask);
    Ok(MultitaskData {
        inputs,
        time,
        sleep,
        keys,
    })
}

#[derive(Clone, Debug)]
pub struct MultitaskPhase1 {
    pub backbone: Backbone,
    pub losses: Vec<f64>,
}

/// Joint training on `MSE(time) + λ · masked MSE(sleep)`.
pub fn train_multitask(
    data: &MultitaskData,
    cfg: &MultitaskConfig,
    seed: u64,
) -> Result<MultitaskPhase1, MultitaskError> {
    if data.keys.is_empty() {
        return Err(TrainError::EmptyTrainingSet.into());
    }
    if data.sleep.weights.as_ref().is_some_and(|w| w.iter().all(|&m| m == 0.0)) {
        log::warn!("no training window carries a sleep annotation; training the time head only");
    }
    let mut backbone = Backbone::new(
        cfg.encoder,
        MULTITASK_INPUT_DIM,
        &[(TIME_HEAD, TIME_DIM), (SLEEP_HEAD, SLEEP_DIM)],
        cfg.ensemble.hidden,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let tasks = [
        HeadTask {
            head: &backbone.heads[0],
            target: &data.time,
            weight: 1.0,
        },
        HeadTask {
            head: &backbone.heads[1],
            target: &data.sleep,
            weight: cfg.sleep_loss_weight as f32,
        },
    ];
    let losses = train_backbone(
        &mut backbone.store,
        &backbone.encoder,
        &tasks,
        &data.inputs,
        &cfg.train,
        &mut rng,
    )?;
    Ok(MultitaskPhase1 { backbone, losses })
}

#[derive(Clone, Debug)]
pub struct MultitaskModel {
    pub config: MultitaskConfig,
    pub seeds: UnitSeeds,
    pub sleep_seeds: Vec<u64>,
    pub medians: Option<SleepMedians>,
    pub backbone: Backbone,
    pub time_ensemble: Ensemble,
    pub sleep_ensemble: Ensemble,
    pub losses: Vec<f64>,
}

pub fn fit_multitask(
    days: &[NormalizedDay],
    cfg: &MultitaskConfig,
    seed: u64,
) -> Result<MultitaskModel, MultitaskError> {
    let train: Vec<NormalizedDay> = days.iter().filter(|d| d.split == Split::Train).cloned().collect();
    let medians = sleep_medians(&train);
    let data = build_streams(&train, medians, cfg.window_size, cfg.stride)?;
    let seeds = UnitSeeds::derive(seed, cfg.ensemble.k);
    let sleep_seeds: Vec<u64> = (0..cfg.ensemble.k as u64).map(|i| derive_seed(seed, 300 + i)).collect();
    let phase1 = train_multitask(&data, cfg, seeds.backbone)?;
    let z = phase1.backbone.embed_all(&data.inputs)?;
    let time_ensemble = train_ensemble(&z, &data.time, &cfg.ensemble, &cfg.train, &seeds.heads, seeds.order)?;
    let sleep_ensemble = train_ensemble(&z, &data.sleep, &cfg.ensemble, &cfg.train, &sleep_seeds, seeds.order)?;
    Ok(MultitaskModel {
        config: cfg.clone(),
        seeds,
        sleep_seeds,
        medians,
        backbone: phase1.backbone,
        time_ensemble,
        sleep_ensemble,
        losses: phase1.losses,
    })
}

/// Day-mean head variances and their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedDayVariance {
    pub v_time: f64,
    pub v_sleep: f64,
    pub combined: f64,
}

pub fn combine_variance(v_time: f64, v_sleep: f64, time_weight: f64, sleep_weight: f64) -> CombinedDayVariance {
    CombinedDayVariance {
        v_time,
        v_sleep,
        combined: time_weight * v_time + sleep_weight * v_sleep,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskDay {
    pub date_index: i64,
    pub windows: usize,
    /// `None` for an unscorable day.
    pub variance: Option<CombinedDayVariance>,
}

/// Per-window `(v_time, v_sleep)`.
pub type WindowVariances = (Vec<WindowKey>, Vec<(f64, f64)>);

impl MultitaskModel {
    pub fn window_variances(&self, days: &[NormalizedDay]) -> Result<WindowVariances, MultitaskError> {
        let data = build_streams(days, self.medians, self.config.window_size, self.config.stride)?;
        if data.keys.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let z = self.backbone.embed_all(&data.inputs)?;
        let t = self.time_ensemble.stats(&z)?;
        let s = self.sleep_ensemble.stats(&z)?;
        Ok((data.keys, t.iter().zip(&s).map(|(a, b)| (a.u, b.u)).collect()))
    }

    pub fn score_days(&self, days: &[NormalizedDay]) -> Result<Vec<MultitaskDay>, MultitaskError> {
        let (keys, v) = self.window_variances(days)?;
        let pos: std::collections::HashMap<i64, usize> =
            days.iter().enumerate().map(|(i, d)| (d.date_index, i)).collect();
        let mut per_day: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); days.len()];
        for (k, &(a, b)) in keys.iter().zip(&v) {
            let slot = &mut per_day[pos[&k.date_index]];
            slot.0.push(a);
            slot.1.push(b);
        }
        Ok(days
            .iter()
            .zip(per_day)
            .map(|(d, (t, s))| MultitaskDay {
                date_index: d.date_index,
                windows: t.len(),
                variance: daily_uncertainty(&t).zip(daily_uncertainty(&s)).map(|(vt, vs)| {
                    combine_variance(
                        vt,
                        vs,
                        self.config.time_variance_weight,
                        self.config.sleep_variance_weight,
                    )
                }),
            })
            .collect())
    }

    pub fn to_bundle(&self) -> MultitaskBundle {
        let d = self.config.encoder.d_model;
        let h = self.config.ensemble.hidden;
        MultitaskBundle {
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            sleep_seeds: self.sleep_seeds.clone(),
            medians: self.medians,
            input_dim: MULTITASK_INPUT_DIM,
            backbone: ParamCheckpoint::from_store(&self.backbone.store),
            time_ensemble: EnsembleRecord::new(TIME_HEAD, &self.time_ensemble, d, h, self.seeds.order),
            sleep_ensemble: EnsembleRecord::new(SLEEP_HEAD, &self.sleep_ensemble, d, h, self.seeds.order),
            losses: self.losses.clone(),
        }
    }

    pub fn from_bundle(b: &MultitaskBundle) -> Result<Self, MultitaskError> {
        if b.input_dim != MULTITASK_INPUT_DIM {
            return Err(MultitaskError::Bundle(format!(
                "input_dim {} != {MULTITASK_INPUT_DIM}",
                b.input_dim
            )));
        }
        let backbone = Backbone::load(
            b.config.encoder,
            b.input_dim,
            &[(TIME_HEAD, TIME_DIM), (SLEEP_HEAD, SLEEP_DIM)],
            b.config.ensemble.hidden,
            &b.backbone,
        )?;
        Ok(Self {
            config: b.config.clone(),
            seeds: b.seeds.clone(),
            sleep_seeds: b.sleep_seeds.clone(),
            medians: b.medians,
            backbone,
            time_ensemble: b.time_ensemble.restore()?,
            sleep_ensemble: b.sleep_ensemble.restore()?,
            losses: b.losses.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskBundle {
    pub config: MultitaskConfig,
    pub seeds: UnitSeeds,
    pub sleep_seeds: Vec<u64>,
    pub medians: Option<SleepMedians>,
    pub input_dim: usize,
    pub backbone: ParamCheckpoint,
    pub time_ensemble: EnsembleRecord,
    pub sleep_ensemble: EnsembleRecord,
    pub losses: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Label, SLOTS_PER_DAY};

    fn small(epochs: usize) -> MultitaskConfig {
        MultitaskConfig {
            encoder: EncoderConfig {
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                ffn_dim: 32,
                dropout_rate: 0.0,
                positional_mode: PositionalMode::Alibi,
            },
            train: TrainConfig {
                epochs,
                ..Default::default()
            },
            ensemble: EnsembleConfig {
                k: 2,
                resample_fraction: 0.2,
                hidden: 16,
            },
            ..Default::default()
        }
    }

    fn day(date: i64, split: Split, sleep: Option<(f64, f64)>) -> NormalizedDay {
        NormalizedDay {
            patient_id: "p".into(),
            date_index: date,
            label: Label::Remission,
            split,
            sleep_onset_min: sleep.map(|s| s.0),
            wake_min: sleep.map(|s| s.1),
            features: (0..SLOTS_PER_DAY)
                .map(|i| {
                    let x = (i as f64 * std::f64::consts::TAU / 288.0).sin();
                    let y = (i as f64 * std::f64::consts::TAU / 288.0).cos();
                    [x, y, 0.0, x, 0.0, y, 0.0, -x, 1.0, 1.0]
                })
                .collect(),
            target_valid: vec![true; SLOTS_PER_DAY],
        }
    }

    #[test]
    fn sleep_targets_and_stream_width() {
        let d = day(0, Split::Train, Some((1380.0, 420.0)));
        let data = build_streams(
            &[d],
            sleep_medians(&[day(0, Split::Train, Some((1380.0, 420.0)))]),
            24,
            24,
        )
        .unwrap();
        assert_eq!(data.inputs.input_dim, 14);
        assert_eq!(data.keys.len(), 12);
        let on = time_embedding(1380.0).unwrap();
        let wake = time_embedding(420.0).unwrap();
        let want = [
            on.sin_component,
            on.cos_component,
            wake.sin_component,
            wake.cos_component,
        ];
        for (g, w) in data.sleep.row(0).iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
        assert_eq!(data.sleep.weights.as_ref().unwrap(), &vec![1.0; 12]);
        let first_slot = &data.inputs.inputs[..14];
        assert!((f64::from(first_slot[10]) - on.sin_component).abs() < 1e-6);
    }

    #[test]
    fn missing_annotation_masks_sleep_loss() {
        let data = build_streams(&[day(0, Split::Val, None)], None, 24, 24).unwrap();
        assert!(data.sleep.weights.as_ref().unwrap().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn onset_median_wraps_past_midnight() {
        let days = [
            day(0, Split::Train, Some((1410.0, 400.0))),
            day(1, Split::Train, Some((30.0, 420.0))),
            day(2, Split::Train, Some((1430.0, 440.0))),
            day(3, Split::Val, Some((600.0, 900.0))),
        ];
        let m = sleep_medians(&days).unwrap();
        assert_eq!(m.onset_min, 1430.0);
        assert_eq!(m.wake_min, 420.0);
        assert!(sleep_medians(&[day(0, Split::Train, None)]).is_none());
    }

    #[test]
    fn combined_weights() {
        assert!((combine_variance(1.0, 0.0, 0.7, 0.3).combined - 0.7).abs() < 1e-15);
        let v = 0.37;
        assert!((combine_variance(v, v, 0.7, 0.3).combined - v).abs() < 1e-15);
        assert_eq!(combine_variance(0.25, 9.0, 1.0, 0.0).combined, 0.25);
    }

    #[test]
    fn zero_sleep_weight_matches_time_only_training() {
        let days: Vec<_> = (0..2).map(|i| day(i, Split::Train, Some((1380.0, 420.0)))).collect();
        let data = build_streams(&days, sleep_medians(&days), 24, 24).unwrap();
        let cfg = MultitaskConfig {
            sleep_loss_weight: 0.0,
            ..small(2)
        };
        let joint = train_multitask(&data, &cfg, 4).unwrap();

        let mut b = Backbone::new(
            cfg.encoder,
            MULTITASK_INPUT_DIM,
            &[(TIME_HEAD, TIME_DIM), (SLEEP_HEAD, SLEEP_DIM)],
            cfg.ensemble.hidden,
            4,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(4, 1));
        let tasks = [HeadTask {
            head: &b.heads[0],
            target: &data.time,
            weight: 1.0,
        }];
        let losses = train_backbone(&mut b.store, &b.encoder, &tasks, &data.inputs, &cfg.train, &mut rng).unwrap();
        assert_eq!(losses, joint.losses);
    }

    #[test]
    fn time_head_beats_target_variance() {
        let days: Vec<_> = (0..8).map(|i| day(i, Split::Train, Some((1380.0, 420.0)))).collect();
        let val: Vec<_> = (8..10).map(|i| day(i, Split::Val, Some((1380.0, 420.0)))).collect();
        let cfg = MultitaskConfig {
            stride: 12,
            ..small(30)
        };
        let data = build_streams(&days, sleep_medians(&days), 24, 12).unwrap();
        let trained = train_multitask(&data, &cfg, 2).unwrap();
        let vdata = build_streams(&val, sleep_medians(&days), 24, 12).unwrap();
        let z = trained.backbone.embed_all(&vdata.inputs).unwrap();
        let mut g = crate::autodiff::Graph::<f32>::inference();
        let x = g.constant(z);
        let y = trained.backbone.heads[0]
            .forward(&mut g, &trained.backbone.store, x)
            .unwrap();
        let pred = g.value(y);
        let n = vdata.time.len();
        let mut mse = 0.0;
        let mut var = 0.0;
        for j in 0..TIME_DIM {
            let col: Vec<f64> = (0..n).map(|r| f64::from(vdata.time.row(r)[j])).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            var += col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            mse += (0..n)
                .map(|r| (f64::from(pred.get(r, j)) - col[r]).powi(2))
                .sum::<f64>()
                / n as f64;
        }
        assert!(mse < var, "{mse} vs {var}");
    }

    #[test]
    fn fit_score_and_bundle_round_trip() {
        let mut days: Vec<_> = (0..3).map(|i| day(i, Split::Train, Some((1380.0, 420.0)))).collect();
        days.push(day(3, Split::Test, None));
        let cfg = small(1);
        let model = fit_multitask(&days, &cfg, 11).unwrap();
        let scores = model.score_days(&days).unwrap();
        assert!(scores.iter().all(|s| s.windows == 12));
        let v = scores[0].variance.unwrap();
        assert!((v.combined - (0.7 * v.v_time + 0.3 * v.v_sleep)).abs() < 1e-12);
        let json = serde_json::to_string(&model.to_bundle()).unwrap();
        let back = MultitaskModel::from_bundle(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.score_days(&days).unwrap(), scores);
    }
}
