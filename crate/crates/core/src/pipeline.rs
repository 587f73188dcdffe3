//! Experiment stages over a run directory: data, training, scoring, fusion,
//! evaluation, reporting and ablation sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DataSource, ExperimentConfig, FusionKind};
use crate::datamodel::{
    days_from_raw, normalize_features, read_days, write_days, ChannelStats, DataError, DayRecord, Label, Split,
};
use crate::encoder::PositionalMode;
use crate::forecasting::{fit_forecaster, ForecastBundle, ForecastError, ForecastModel};
use crate::multitask::{fit_multitask, MultitaskBundle, MultitaskError, MultitaskModel};
use crate::scoring::{
    anomaly_score, classify, decision_avg, evaluate_run, fuse, grid_search_alpha, summarize_runs, FusionDays,
    FusionMode, HealthyDistribution, PatientScores, RunMetrics, ScoringError, SeedSummary,
};
use crate::synth::{generate_cohort, SynthError};
use crate::training::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Forecast,
    Multitask,
}

impl PipelineKind {
    pub const ALL: [Self; 2] = [Self::Forecast, Self::Multitask];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forecast => "forecast",
            Self::Multitask => "multitask",
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "forecast" => Ok(Self::Forecast),
            "multitask" => Ok(Self::Multitask),
            _ => Err(format!("unknown pipeline `{s}` (expected forecast or multitask)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing artifact {}: {hint}", path.display())]
    StageOrder { path: PathBuf, hint: String },
    #[error("artifact {} does not match the current config: {message}", path.display())]
    Mismatch { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("malformed artifact {}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Multitask(#[from] MultitaskError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 stage order, 4 data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Mismatch { .. } => 2,
            Self::StageOrder { .. } => 3,
            Self::Data(_) | Self::Synth(_) | Self::Artifact { .. } | Self::Io { .. } => 4,
            Self::Forecast(_) | Self::Multitask(_) | Self::Scoring(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed of one patient's unit within a run seed.
pub fn unit_seed(seed: u64, patient_id: &str) -> u64 {
    let h = Sha256::digest(patient_id.as_bytes());
    derive_seed(seed, u64::from_le_bytes(h[..8].try_into().expect("8 bytes")))
}

/// Days grouped per patient, patients sorted, day order preserved.
pub fn by_patient(days: Vec<DayRecord>) -> BTreeMap<String, Vec<DayRecord>> {
    let mut out: BTreeMap<String, Vec<DayRecord>> = BTreeMap::new();
    for d in days {
        out.entry(d.patient_id.clone()).or_default().push(d);
    }
    out
}

/// Replaces every non-training label with `Unknown`.
pub fn mask_labels(days: &mut [DayRecord]) {
    for d in days.iter_mut().filter(|d| d.split != Split::Train) {
        d.label = Label::Unknown;
    }
}

#[derive(Clone, Debug)]
pub enum UnitModel {
    Forecast(Box<ForecastModel>),
    Multitask(Box<MultitaskModel>),
}

#[derive(Clone, Debug)]
pub struct TrainedUnit {
    pub patient_id: String,
    pub stats: ChannelStats,
    pub model: UnitModel,
}

/// Fits one pipeline on one patient's training days.
pub fn train_unit(kind: PipelineKind, cfg: &ExperimentConfig, days: &[DayRecord], seed: u64) -> Result<TrainedUnit> {
    let patient_id = days
        .first()
        .map(|d| d.patient_id.clone())
        .ok_or_else(|| DataError::RejectedInput("patient without days".into()))?;
    let train: Vec<DayRecord> = days.iter().filter(|d| d.split == Split::Train).cloned().collect();
    let (norm, stats) = normalize_features(&train, &train)?;
    let s = unit_seed(seed, &patient_id);
    let model = match kind {
        PipelineKind::Forecast => UnitModel::Forecast(Box::new(fit_forecaster(&norm, &cfg.forecast, s)?)),
        PipelineKind::Multitask => UnitModel::Multitask(Box::new(fit_multitask(&norm, &cfg.multitask, s)?)),
    };
    Ok(TrainedUnit {
        patient_id,
        stats,
        model,
    })
}

/// One row of a day-score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayScoreRow {
    pub patient_id: String,
    pub date_index: i64,
    pub split: Split,
    pub windows: usize,
    #[serde(rename = "U_d")]
    pub u_d: Option<f64>,
    #[serde(rename = "A_d")]
    pub a_d: Option<f64>,
    pub decision: Option<u8>,
    pub pipeline: PipelineKind,
    #[serde(rename = "V_time")]
    pub v_time: Option<f64>,
    #[serde(rename = "V_sleep")]
    pub v_sleep: Option<f64>,
    pub combined: Option<f64>,
}

/// Healthy distribution of one patient for one pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDistribution {
    pub patient_id: String,
    pub distribution: Option<HealthyDistribution>,
    pub training_days: usize,
}

/// Scores every day of the patient and normalizes against the training
/// days. The multi-task pipeline fits on `V_time` and normalizes the
/// combined variance.
pub fn score_unit(unit: &TrainedUnit, days: &[DayRecord], tau: f64) -> Result<(Vec<DayScoreRow>, PatientDistribution)> {
    let norm: Vec<_> = days.iter().map(|d| unit.stats.apply(d)).collect();
    let mut rows: Vec<DayScoreRow> = match &unit.model {
        UnitModel::Forecast(m) => m
            .score_days(&norm)?
            .into_iter()
            .map(|s| DayScoreRow {
                patient_id: unit.patient_id.clone(),
                date_index: s.date_index,
                split: Split::Train,
                windows: s.windows,
                u_d: s.value,
                a_d: None,
                decision: None,
                pipeline: PipelineKind::Forecast,
                v_time: None,
                v_sleep: None,
                combined: None,
            })
            .collect(),
        UnitModel::Multitask(m) => m
            .score_days(&norm)?
            .into_iter()
            .map(|s| DayScoreRow {
                patient_id: unit.patient_id.clone(),
                date_index: s.date_index,
                split: Split::Train,
                windows: s.windows,
                u_d: s.variance.map(|v| v.combined),
                a_d: None,
                decision: None,
                pipeline: PipelineKind::Multitask,
                v_time: s.variance.map(|v| v.v_time),
                v_sleep: s.variance.map(|v| v.v_sleep),
                combined: s.variance.map(|v| v.combined),
            })
            .collect(),
    };
    for (row, day) in rows.iter_mut().zip(days) {
        row.split = day.split;
    }
    let fit_on = |r: &DayScoreRow| match r.pipeline {
        PipelineKind::Forecast => r.u_d,
        PipelineKind::Multitask => r.v_time,
    };
    let train_scores: Vec<f64> = rows
        .iter()
        .filter(|r| r.split == Split::Train)
        .filter_map(fit_on)
        .collect();
    let distribution = match HealthyDistribution::fit_with_fallback(&train_scores) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("{}: no healthy distribution ({e}); days left unscored", unit.patient_id);
            None
        }
    };
    if let Some(dist) = &distribution {
        for r in &mut rows {
            r.a_d = r.u_d.map(|u| anomaly_score(u, dist));
            r.decision = r.a_d.map(|a| classify(a, tau));
        }
    }
    Ok((
        rows,
        PatientDistribution {
            patient_id: unit.patient_id.clone(),
            distribution,
            training_days: train_scores.len(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPick {
    pub alpha: Option<f64>,
    pub tau: f64,
    /// Validation objective at the pick; absent for fixed settings.
    pub val_avg: Option<f64>,
}

/// Validation-selected settings of the three fusion modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionChoice {
    pub primary: FusionKind,
    pub weighted: FusionPick,
    pub max: FusionPick,
    pub min: FusionPick,
}

impl FusionChoice {
    pub fn pick(&self, kind: FusionKind) -> (FusionMode, f64) {
        match kind {
            FusionKind::Weighted => (
                FusionMode::Weighted {
                    alpha: self.weighted.alpha.unwrap_or(0.5),
                },
                self.weighted.tau,
            ),
            FusionKind::Max => (FusionMode::Max, self.max.tau),
            FusionKind::Min => (FusionMode::Min, self.min.tau),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedRow {
    pub patient_id: String,
    pub date_index: i64,
    #[serde(rename = "A_heart")]
    pub a_heart: Option<f64>,
    #[serde(rename = "A_sleep")]
    pub a_sleep: Option<f64>,
    pub fused: Option<f64>,
    pub decision: Option<u8>,
}

type DayKey = (String, i64);

fn anomaly_map(rows: &[DayScoreRow]) -> HashMap<DayKey, (Split, Option<f64>)> {
    rows.iter()
        .map(|r| ((r.patient_id.clone(), r.date_index), (r.split, r.a_d)))
        .collect()
}

/// Per-patient fusion inputs for labelled days of `split`.
pub fn fusion_days(
    heart: &[DayScoreRow],
    sleep: &[DayScoreRow],
    labels: &HashMap<DayKey, Label>,
    split: Split,
) -> Vec<FusionDays> {
    let s = anomaly_map(sleep);
    let mut out: BTreeMap<String, FusionDays> = BTreeMap::new();
    for r in heart.iter().filter(|r| r.split == split) {
        let key = (r.patient_id.clone(), r.date_index);
        let positive = match labels.get(&key) {
            Some(Label::Relapse) => true,
            Some(Label::Remission) => false,
            _ => continue,
        };
        let p = out.entry(r.patient_id.clone()).or_insert_with(|| FusionDays {
            patient_id: r.patient_id.clone(),
            a_heart: Vec::new(),
            a_sleep: Vec::new(),
            labels: Vec::new(),
        });
        p.a_heart.push(r.a_d);
        p.a_sleep.push(s.get(&key).and_then(|v| v.1));
        p.labels.push(positive);
    }
    out.into_values().collect()
}

fn choose_tau(val: &[FusionDays], mode: FusionMode, fixed: Option<f64>, taus: &[f64]) -> FusionPick {
    if let Some(tau) = fixed {
        return FusionPick {
            alpha: None,
            tau,
            val_avg: decision_avg(val, mode, tau),
        };
    }
    let mut taus = taus.to_vec();
    taus.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut best = FusionPick {
        alpha: None,
        tau: taus[0],
        val_avg: None,
    };
    for tau in taus {
        if let Some(avg) = decision_avg(val, mode, tau) {
            if best.val_avg.is_none_or(|b| avg > b) {
                best = FusionPick {
                    alpha: None,
                    tau,
                    val_avg: Some(avg),
                };
            }
        }
    }
    best
}

/// Selects fusion settings on validation days.
pub fn select_fusion(cfg: &ExperimentConfig, val: &[FusionDays]) -> Result<FusionChoice> {
    let fc = &cfg.fusion;
    let alphas = fc.alpha.map_or_else(|| fc.alpha_grid.clone(), |a| vec![a]);
    let taus = fc.tau.map_or_else(|| fc.tau_grid.clone(), |t| vec![t]);
    let g = grid_search_alpha(val, &alphas, &taus)?;
    Ok(FusionChoice {
        primary: fc.mode,
        weighted: FusionPick {
            alpha: Some(g.alpha),
            tau: g.tau,
            val_avg: Some(g.avg),
        },
        max: choose_tau(val, FusionMode::Max, fc.tau, &fc.tau_grid),
        min: choose_tau(val, FusionMode::Min, fc.tau, &fc.tau_grid),
    })
}

pub fn fused_rows(heart: &[DayScoreRow], sleep: &[DayScoreRow], choice: &FusionChoice) -> Vec<FusedRow> {
    let s = anomaly_map(sleep);
    let (mode, tau) = choice.pick(choice.primary);
    heart
        .iter()
        .map(|r| {
            let a_sleep = s.get(&(r.patient_id.clone(), r.date_index)).and_then(|v| v.1);
            let fused = fuse(r.a_d, a_sleep, mode);
            FusedRow {
                patient_id: r.patient_id.clone(),
                date_index: r.date_index,
                a_heart: r.a_d,
                a_sleep,
                fused,
                decision: fused.map(|f| classify(f, tau)),
            }
        })
        .collect()
}

/// Metric keys in report order.
pub const DETECTORS: [&str; 5] = ["forecast", "multitask", "fused_weighted", "fused_max", "fused_min"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub fusion: FusionChoice,
    /// Ranking metrics of continuous scores.
    pub scores: BTreeMap<String, RunMetrics>,
    /// Ranking metrics of thresholded decisions.
    pub decisions: BTreeMap<String, RunMetrics>,
}

type Detector<'a> = (&'a str, Box<dyn Fn(Option<f64>, Option<f64>) -> Option<f64> + 'a>, f64);

/// Test-split metrics of every detector for one seed.
pub fn evaluate_seed(cfg: &ExperimentConfig, seed: u64, test: &[FusionDays], choice: &FusionChoice) -> SeedMetrics {
    let detectors: [Detector; 5] = [
        ("forecast", Box::new(|h, _| h), cfg.tau.forecast),
        ("multitask", Box::new(|_, s| s), cfg.tau.multitask),
        (
            "fused_weighted",
            Box::new(|h, s| fuse(h, s, choice.pick(FusionKind::Weighted).0)),
            choice.weighted.tau,
        ),
        (
            "fused_max",
            Box::new(|h, s| fuse(h, s, FusionMode::Max)),
            choice.max.tau,
        ),
        (
            "fused_min",
            Box::new(|h, s| fuse(h, s, FusionMode::Min)),
            choice.min.tau,
        ),
    ];
    let mut scores = BTreeMap::new();
    let mut decisions = BTreeMap::new();
    for (name, f, tau) in detectors {
        let (mut sp, mut dp) = (Vec::new(), Vec::new());
        for p in test {
            let mut s = PatientScores {
                patient_id: p.patient_id.clone(),
                scores: Vec::new(),
                labels: Vec::new(),
            };
            for i in 0..p.labels.len() {
                if let Some(v) = f(p.a_heart[i], p.a_sleep[i]) {
                    s.scores.push(v);
                    s.labels.push(p.labels[i]);
                }
            }
            let mut d = s.clone();
            d.scores = s.scores.iter().map(|&v| f64::from(classify(v, tau))).collect();
            sp.push(s);
            dp.push(d);
        }
        scores.insert(name.to_string(), evaluate_run(&sp, cfg.aggregation));
        decisions.insert(name.to_string(), evaluate_run(&dp, cfg.aggregation));
    }
    SeedMetrics {
        seed,
        fusion: *choice,
        scores,
        decisions,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, SeedSummary>,
    pub decision_summary: BTreeMap<String, SeedSummary>,
    pub config: ExperimentConfig,
}

pub fn summarize(cfg: &ExperimentConfig, per_seed: Vec<SeedMetrics>) -> MetricsReport {
    let collect = |pick: fn(&SeedMetrics) -> &BTreeMap<String, RunMetrics>| {
        DETECTORS
            .iter()
            .map(|&d| {
                let runs: Vec<RunMetrics> = per_seed.iter().map(|s| pick(s)[d].clone()).collect();
                (d.to_string(), summarize_runs(&runs))
            })
            .collect()
    };
    MetricsReport {
        config_hash: cfg.hash(),
        seeds: per_seed.iter().map(|s| s.seed).collect(),
        summary: collect(|s| &s.scores),
        decision_summary: collect(|s| &s.decisions),
        per_seed,
        config: cfg.clone(),
    }
}

/// Label lookup for fusion selection and evaluation.
pub fn label_map(days: &[DayRecord]) -> HashMap<DayKey, Label> {
    days.iter()
        .map(|d| ((d.patient_id.clone(), d.date_index), d.label))
        .collect()
}

/// Scores of both pipelines for every seed, computed in memory.
pub type SeedScores = BTreeMap<u64, BTreeMap<PipelineKind, Vec<DayScoreRow>>>;

/// Trains and scores every (seed, patient, pipeline) unit in parallel.
pub fn train_and_score(cfg: &ExperimentConfig, days: &[DayRecord], kinds: &[PipelineKind]) -> Result<SeedScores> {
    let mut masked = days.to_vec();
    mask_labels(&mut masked);
    let patients = by_patient(masked);
    let mut units: Vec<(u64, PipelineKind, &Vec<DayRecord>)> = Vec::new();
    for &s in &cfg.seeds {
        for &k in kinds {
            units.extend(patients.values().map(|p| (s, k, p)));
        }
    }
    let scored: Vec<(u64, PipelineKind, Vec<DayScoreRow>)> = units
        .par_iter()
        .map(|&(seed, kind, p)| {
            let t = Instant::now();
            let unit = train_unit(kind, cfg, p, seed)?;
            let (rows, _) = score_unit(&unit, p, tau_of(cfg, kind))?;
            log::info!(
                "seed {seed} {kind} {} in {:.1}s",
                unit.patient_id,
                t.elapsed().as_secs_f64()
            );
            Ok((seed, kind, rows))
        })
        .collect::<Result<_>>()?;
    let mut out = SeedScores::new();
    for (seed, kind, rows) in scored {
        out.entry(seed).or_default().entry(kind).or_default().extend(rows);
    }
    Ok(out)
}

fn tau_of(cfg: &ExperimentConfig, kind: PipelineKind) -> f64 {
    match kind {
        PipelineKind::Forecast => cfg.tau.forecast,
        PipelineKind::Multitask => cfg.tau.multitask,
    }
}

/// Fusion selection and evaluation of in-memory scores.
pub fn evaluate_scores(cfg: &ExperimentConfig, scores: &SeedScores, days: &[DayRecord]) -> Result<MetricsReport> {
    let labels = label_map(days);
    let mut per_seed = Vec::new();
    for (&seed, by_kind) in scores {
        let (h, s) = (&by_kind[&PipelineKind::Forecast], &by_kind[&PipelineKind::Multitask]);
        let choice = select_fusion(cfg, &fusion_days(h, s, &labels, Split::Val))?;
        per_seed.push(evaluate_seed(
            cfg,
            seed,
            &fusion_days(h, s, &labels, Split::Test),
            &choice,
        ));
    }
    Ok(summarize(cfg, per_seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Posenc,
    Stride,
    Window,
    Tau,
    Alpha,
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "posenc" => Ok(Self::Posenc),
            "stride" => Ok(Self::Stride),
            "window" => Ok(Self::Window),
            "tau" => Ok(Self::Tau),
            "alpha" => Ok(Self::Alpha),
            _ => Err(format!("unknown ablation axis `{s}`")),
        }
    }
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Posenc => "posenc",
            Self::Stride => "stride",
            Self::Window => "window",
            Self::Tau => "tau",
            Self::Alpha => "alpha",
        }
    }
}

/// Strides and window sizes swept by the geometry ablations.
pub const ABLATION_GEOMETRY: [usize; 4] = [12, 24, 36, 48];

/// One ablation table row: mean and sample std over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub detector: String,
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
    pub auprc_mean: Option<f64>,
    pub auprc_std: Option<f64>,
    pub avg_mean: Option<f64>,
    pub avg_std: Option<f64>,
}

fn ablation_row(axis: AblationAxis, value: String, detector: &str, s: &SeedSummary) -> AblationRow {
    let m = s.aggregate;
    AblationRow {
        axis,
        value,
        detector: detector.to_string(),
        auroc_mean: m.auroc.map(|v| v.mean),
        auroc_std: m.auroc.map(|v| v.std),
        auprc_mean: m.auprc.map(|v| v.mean),
        auprc_std: m.auprc.map(|v| v.std),
        avg_mean: m.avg.map(|v| v.mean),
        avg_std: m.avg.map(|v| v.std),
    }
}

/// Configurations of a retraining sweep, labelled by axis value.
pub fn ablation_configs(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    match axis {
        AblationAxis::Posenc => [PositionalMode::Sinusoidal, PositionalMode::Rope, PositionalMode::Alibi]
            .into_iter()
            .map(|m| {
                let mut c = cfg.clone();
                c.forecast.encoder.positional_mode = m;
                c.multitask.encoder.positional_mode = m;
                (m.as_str().to_string(), c)
            })
            .collect(),
        AblationAxis::Stride | AblationAxis::Window => ABLATION_GEOMETRY
            .into_iter()
            .map(|v| {
                let mut c = cfg.clone();
                if axis == AblationAxis::Stride {
                    c.forecast.stride = v;
                    c.multitask.stride = v;
                } else {
                    c.forecast.window_size = v;
                    c.multitask.window_size = v;
                }
                (v.to_string(), c)
            })
            .collect(),
        AblationAxis::Tau | AblationAxis::Alpha => Vec::new(),
    }
}

/// Sweeps one axis. Geometry and positional axes retrain; threshold and
/// weight axes reuse `scores`, which must then be present.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    days: &[DayRecord],
    scores: Option<&SeedScores>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Posenc | AblationAxis::Stride | AblationAxis::Window => {
            for (value, c) in ablation_configs(cfg, axis) {
                c.validate()?;
                let t = Instant::now();
                let s = train_and_score(&c, days, &PipelineKind::ALL)?;
                let report = evaluate_scores(&c, &s, days)?;
                log::info!("ablate {} = {value}: {:.1}s", axis.as_str(), t.elapsed().as_secs_f64());
                for d in DETECTORS {
                    rows.push(ablation_row(axis, value.clone(), d, &report.summary[d]));
                }
            }
        }
        AblationAxis::Tau | AblationAxis::Alpha => {
            let scores = scores.ok_or_else(|| PipelineError::StageOrder {
                path: PathBuf::from("scores"),
                hint: "run `score` for both pipelines first".into(),
            })?;
            let labels = label_map(days);
            let grid = if axis == AblationAxis::Tau {
                &cfg.fusion.tau_grid
            } else {
                &cfg.fusion.alpha_grid
            };
            for &v in grid {
                let mut c = cfg.clone();
                let mut per_seed = Vec::new();
                for (&seed, by_kind) in scores {
                    let (h, s) = (&by_kind[&PipelineKind::Forecast], &by_kind[&PipelineKind::Multitask]);
                    if axis == AblationAxis::Tau {
                        c.tau.forecast = v;
                        c.tau.multitask = v;
                        c.fusion.tau = Some(v);
                    } else {
                        c.fusion.alpha = Some(v);
                    }
                    let choice = select_fusion(&c, &fusion_days(h, s, &labels, Split::Val))?;
                    per_seed.push(evaluate_seed(
                        &c,
                        seed,
                        &fusion_days(h, s, &labels, Split::Test),
                        &choice,
                    ));
                }
                let report = summarize(&c, per_seed);
                if axis == AblationAxis::Tau {
                    for d in DETECTORS {
                        rows.push(ablation_row(axis, format!("{v}"), d, &report.decision_summary[d]));
                    }
                } else {
                    rows.push(ablation_row(
                        axis,
                        format!("{v}"),
                        "fused_weighted",
                        &report.summary["fused_weighted"],
                    ));
                }
            }
        }
    }
    Ok(rows)
}

fn fmt_ms(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "n/a".into(),
    }
}

/// Fixed-width text rendering of an ablation table.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<12} {:<16} {:<18} {:<18} {:<18}\n",
        "value", "detector", "AUROC", "AUPRC", "AVG"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<16} {:<18} {:<18} {:<18}\n",
            r.value,
            r.detector,
            fmt_ms(r.auroc_mean, r.auroc_std),
            fmt_ms(r.auprc_mean, r.auprc_std),
            fmt_ms(r.avg_mean, r.avg_std)
        ));
    }
    out
}

/// Aggregate and per-patient tables of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub detector: String,
    pub patient_id: String,
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
    pub auprc_mean: Option<f64>,
    pub auprc_std: Option<f64>,
    pub avg_mean: Option<f64>,
    pub avg_std: Option<f64>,
}

pub fn report_rows(report: &MetricsReport) -> (Vec<ReportRow>, Vec<ReportRow>) {
    let row = |detector: &str, patient: &str, m: &crate::scoring::MetricSummary| ReportRow {
        detector: detector.to_string(),
        patient_id: patient.to_string(),
        auroc_mean: m.auroc.map(|v| v.mean),
        auroc_std: m.auroc.map(|v| v.std),
        auprc_mean: m.auprc.map(|v| v.mean),
        auprc_std: m.auprc.map(|v| v.std),
        avg_mean: m.avg.map(|v| v.mean),
        avg_std: m.avg.map(|v| v.std),
    };
    let mut agg = Vec::new();
    let mut per = Vec::new();
    for d in DETECTORS {
        let s = &report.summary[d];
        agg.push(row(d, "all", &s.aggregate));
        for (p, m) in &s.per_patient {
            per.push(row(d, p, m));
        }
    }
    (agg, per)
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let mut out = format!(
        "{:<16} {:<8} {:<18} {:<18} {:<18}\n",
        "detector", "patient", "AUROC", "AUPRC", "AVG"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:<8} {:<18} {:<18} {:<18}\n",
            r.detector,
            r.patient_id,
            fmt_ms(r.auroc_mean, r.auroc_std),
            fmt_ms(r.auprc_mean, r.auprc_std),
            fmt_ms(r.avg_mean, r.avg_std)
        ));
    }
    out
}

/// Provenance written next to every CSV artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelArtifact<B> {
    config_hash: String,
    seed: u64,
    pipeline: PipelineKind,
    patient_id: String,
    stats: ChannelStats,
    bundle: B,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DistributionArtifact {
    config_hash: String,
    seed: u64,
    pipeline: PipelineKind,
    patients: Vec<PatientDistribution>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FusionArtifact {
    config_hash: String,
    seed: u64,
    choice: FusionChoice,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seeds: Vec<u64>,
    artifacts: BTreeMap<String, String>,
}

/// A run directory bound to one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub root: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Experiment {
    pub fn new(config: ExperimentConfig, root: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hash: config.hash(),
            config,
            root,
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, rel: impl AsRef<Path>, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::StageOrder {
                path: p,
                hint: hint.to_string(),
            })
        }
    }

    fn create(&self, rel: impl AsRef<Path>) -> Result<BufWriter<fs::File>> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?))
    }

    fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        let rel = rel.as_ref();
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| PipelineError::Artifact {
            path: self.path(rel),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(&self.path(rel)))?;
        w.flush().map_err(io_err(&self.path(rel)))
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| PipelineError::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn check_hash(&self, path: &Path, hash: &str) -> Result<()> {
        if hash == self.hash {
            Ok(())
        } else {
            Err(PipelineError::Mismatch {
                path: path.to_path_buf(),
                message: format!(
                    "produced by config {hash}, current config is {}; rerun the stage",
                    self.hash
                ),
            })
        }
    }

    fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T], seed: Option<u64>) -> Result<()> {
        let path = self.path(rel);
        {
            let mut w = csv::Writer::from_writer(self.create(rel)?);
            for r in rows {
                w.serialize(r).map_err(DataError::from)?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        let meta = ArtifactMeta {
            artifact: rel.to_string(),
            config_hash: self.hash.clone(),
            seed,
            sha256: sha256_file(&path)?,
        };
        self.write_json(format!("{rel}.meta.json"), &meta)
    }

    fn read_csv<T: DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>> {
        let meta: ArtifactMeta = self.read_json(&PathBuf::from(format!("{}.meta.json", path.display())))?;
        self.check_hash(path, &meta.config_hash)?;
        let f = fs::File::open(path).map_err(io_err(path))?;
        csv::Reader::from_reader(BufReader::new(f))
            .deserialize()
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|e| PipelineError::Artifact {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// Records hashes of every artifact under the run directory.
    fn update_manifest(&self) -> Result<()> {
        let mut artifacts = BTreeMap::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let p = entry.map_err(io_err(&dir))?.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&self.root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != "manifest.json" && rel != "timings.json" {
                    artifacts.insert(rel, sha256_file(&p)?);
                }
            }
        }
        self.write_json(
            "manifest.json",
            &Manifest {
                config_hash: self.hash.clone(),
                seeds: self.config.seeds.clone(),
                artifacts,
            },
        )
    }

    fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let p = self.path("timings.json");
        let mut t: BTreeMap<String, f64> = if p.exists() {
            self.read_json(&p)?
        } else {
            BTreeMap::new()
        };
        t.insert(stage.to_string(), seconds);
        self.write_json("timings.json", &t)
    }

    fn finish(&self, stage: &str, start: Instant) -> Result<()> {
        self.write_json("config.json", &self.config)?;
        self.record_timing(stage, start.elapsed().as_secs_f64())?;
        self.update_manifest()
    }

    fn data_paths(&self) -> (PathBuf, PathBuf) {
        match &self.config.data {
            DataSource::Synth(_) | DataSource::Run => (self.path("data/slots.csv"), self.path("data/days.csv")),
            DataSource::Csv { slots, sidecar } => (slots.clone(), sidecar.clone()),
        }
    }

    /// Generates the synthetic cohort into `data/`.
    pub fn synth(&self, seed: u64) -> Result<Vec<DayRecord>> {
        let start = Instant::now();
        let DataSource::Synth(s) = &self.config.data else {
            return Err(ConfigError::new("data.source", "synth requires a synthetic data source").into());
        };
        let days = generate_cohort(s, seed)?;
        let slots = self.create("data/slots.csv")?;
        let sidecar = self.create("data/days.csv")?;
        write_days(&days, slots, sidecar)?;
        self.finish("synth", start)?;
        Ok(days)
    }

    /// Aggregates raw samples into the run's `data/` tables.
    pub fn import_raw(&self, raw: &Path, sidecar: &Path) -> Result<Vec<DayRecord>> {
        let start = Instant::now();
        let r = fs::File::open(raw).map_err(io_err(raw))?;
        let s = fs::File::open(sidecar).map_err(io_err(sidecar))?;
        let days = days_from_raw(BufReader::new(r), BufReader::new(s))?;
        write_days(&days, self.create("data/slots.csv")?, self.create("data/days.csv")?)?;
        self.finish("import-raw", start)?;
        Ok(days)
    }

    pub fn load_days(&self) -> Result<Vec<DayRecord>> {
        let (slots, sidecar) = self.data_paths();
        for p in [&slots, &sidecar] {
            if !p.exists() {
                return Err(PipelineError::StageOrder {
                    path: p.clone(),
                    hint: "run `synth` or `import-raw`, or point data.slots/data.sidecar at existing files".into(),
                });
            }
        }
        let s = fs::File::open(&slots).map_err(io_err(&slots))?;
        let d = fs::File::open(&sidecar).map_err(io_err(&sidecar))?;
        Ok(read_days(BufReader::new(s), BufReader::new(d))?)
    }

    fn model_rel(kind: PipelineKind, seed: u64, patient: &str) -> String {
        format!("models/{kind}/seed-{seed}/{patient}.json")
    }

    fn scores_rel(kind: PipelineKind, seed: u64) -> String {
        format!("scores/{kind}/seed-{seed}.csv")
    }

    /// Trains one pipeline for every seed and patient.
    pub fn train(&self, kind: PipelineKind) -> Result<()> {
        let start = Instant::now();
        let mut days = self.load_days()?;
        mask_labels(&mut days);
        let patients = by_patient(days);
        let units: Vec<(u64, &Vec<DayRecord>)> = self
            .config
            .seeds
            .iter()
            .flat_map(|&s| patients.values().map(move |p| (s, p)))
            .collect();
        units.par_iter().try_for_each(|&(seed, p)| {
            let t = Instant::now();
            let unit = train_unit(kind, &self.config, p, seed)?;
            let rel = Self::model_rel(kind, seed, &unit.patient_id);
            match unit.model {
                UnitModel::Forecast(m) => self.write_json(
                    &rel,
                    &self.artifact(seed, kind, &unit.patient_id, unit.stats, m.to_bundle()),
                ),
                UnitModel::Multitask(m) => self.write_json(
                    &rel,
                    &self.artifact(seed, kind, &unit.patient_id, unit.stats, m.to_bundle()),
                ),
            }?;
            log::info!(
                "trained {kind} seed {seed} {} in {:.1}s",
                unit.patient_id,
                t.elapsed().as_secs_f64()
            );
            Ok::<_, PipelineError>(())
        })?;
        self.finish(&format!("train-{kind}"), start)
    }

    fn artifact<B>(
        &self,
        seed: u64,
        pipeline: PipelineKind,
        patient: &str,
        stats: ChannelStats,
        bundle: B,
    ) -> ModelArtifact<B> {
        ModelArtifact {
            config_hash: self.hash.clone(),
            seed,
            pipeline,
            patient_id: patient.to_string(),
            stats,
            bundle,
        }
    }

    fn load_unit(&self, kind: PipelineKind, seed: u64, patient: &str) -> Result<TrainedUnit> {
        let path = self.require(
            Self::model_rel(kind, seed, patient),
            &format!("run `train --pipeline {kind}` first"),
        )?;
        let model = match kind {
            PipelineKind::Forecast => {
                let a: ModelArtifact<ForecastBundle> = self.read_json(&path)?;
                self.check_hash(&path, &a.config_hash)?;
                (
                    a.stats,
                    UnitModel::Forecast(Box::new(ForecastModel::from_bundle(&a.bundle)?)),
                )
            }
            PipelineKind::Multitask => {
                let a: ModelArtifact<MultitaskBundle> = self.read_json(&path)?;
                self.check_hash(&path, &a.config_hash)?;
                (
                    a.stats,
                    UnitModel::Multitask(Box::new(MultitaskModel::from_bundle(&a.bundle)?)),
                )
            }
        };
        Ok(TrainedUnit {
            patient_id: patient.to_string(),
            stats: model.0,
            model: model.1,
        })
    }

    /// Scores all days with the trained units and writes day-score tables.
    pub fn score(&self, kind: PipelineKind) -> Result<()> {
        let start = Instant::now();
        let mut days = self.load_days()?;
        mask_labels(&mut days);
        let patients = by_patient(days);
        let tau = tau_of(&self.config, kind);
        for &seed in &self.config.seeds {
            let scored: Vec<(Vec<DayScoreRow>, PatientDistribution)> = patients
                .par_iter()
                .map(|(id, p)| score_unit(&self.load_unit(kind, seed, id)?, p, tau))
                .collect::<Result<_>>()?;
            let rows: Vec<DayScoreRow> = scored.iter().flat_map(|s| s.0.iter().cloned()).collect();
            self.write_csv(&Self::scores_rel(kind, seed), &rows, Some(seed))?;
            self.write_json(
                format!("scores/{kind}/seed-{seed}.dist.json"),
                &DistributionArtifact {
                    config_hash: self.hash.clone(),
                    seed,
                    pipeline: kind,
                    patients: scored.into_iter().map(|s| s.1).collect(),
                },
            )?;
        }
        self.finish(&format!("score-{kind}"), start)
    }

    fn load_scores(&self) -> Result<SeedScores> {
        let mut out = SeedScores::new();
        for &seed in &self.config.seeds {
            for kind in PipelineKind::ALL {
                let p = self.require(
                    Self::scores_rel(kind, seed),
                    &format!("run `score --pipeline {kind}` first"),
                )?;
                out.entry(seed).or_default().insert(kind, self.read_csv(&p)?);
            }
        }
        Ok(out)
    }

    /// Validation search of fusion settings and the fused-score tables.
    pub fn fuse(&self) -> Result<()> {
        let start = Instant::now();
        let scores = self.load_scores()?;
        let labels = label_map(&self.load_days()?);
        for (&seed, by_kind) in &scores {
            let (h, s) = (&by_kind[&PipelineKind::Forecast], &by_kind[&PipelineKind::Multitask]);
            let choice = select_fusion(&self.config, &fusion_days(h, s, &labels, Split::Val))?;
            self.write_csv(
                &format!("fused/seed-{seed}.csv"),
                &fused_rows(h, s, &choice),
                Some(seed),
            )?;
            self.write_json(
                format!("fused/seed-{seed}.choice.json"),
                &FusionArtifact {
                    config_hash: self.hash.clone(),
                    seed,
                    choice,
                },
            )?;
        }
        self.finish("fuse", start)
    }

    /// Test-split metrics for every seed, written to `metrics.json`.
    pub fn eval(&self) -> Result<MetricsReport> {
        let start = Instant::now();
        let scores = self.load_scores()?;
        let labels = label_map(&self.load_days()?);
        let mut per_seed = Vec::new();
        for (&seed, by_kind) in &scores {
            let p = self.require(format!("fused/seed-{seed}.choice.json"), "run `fuse` first")?;
            let a: FusionArtifact = self.read_json(&p)?;
            self.check_hash(&p, &a.config_hash)?;
            let (h, s) = (&by_kind[&PipelineKind::Forecast], &by_kind[&PipelineKind::Multitask]);
            per_seed.push(evaluate_seed(
                &self.config,
                seed,
                &fusion_days(h, s, &labels, Split::Test),
                &a.choice,
            ));
        }
        let report = summarize(&self.config, per_seed);
        self.write_json("metrics.json", &report)?;
        self.finish("eval", start)?;
        Ok(report)
    }

    /// Aggregate and per-patient tables from `metrics.json`.
    pub fn report(&self) -> Result<String> {
        let start = Instant::now();
        let p = self.require("metrics.json", "run `eval` first")?;
        let report: MetricsReport = self.read_json(&p)?;
        self.check_hash(&p, &report.config_hash)?;
        let (agg, per) = report_rows(&report);
        self.write_csv("report/aggregate.csv", &agg, None)?;
        self.write_csv("report/per_patient.csv", &per, None)?;
        let text = format!("{}\n{}", report_text(&agg), report_text(&per));
        let path = self.path("report/report.txt");
        fs::write(&path, &text).map_err(io_err(&path))?;
        self.finish("report", start)?;
        Ok(text)
    }

    /// Runs one ablation sweep and writes its table.
    pub fn ablate(&self, axis: AblationAxis) -> Result<Vec<AblationRow>> {
        let start = Instant::now();
        let days = self.load_days()?;
        let scores = match axis {
            AblationAxis::Tau | AblationAxis::Alpha => Some(self.load_scores()?),
            _ => None,
        };
        let rows = run_ablation(&self.config, axis, &days, scores.as_ref())?;
        let name = axis.as_str();
        self.write_csv(&format!("ablations/{name}.csv"), &rows, None)?;
        let path = self.path(format!("ablations/{name}.txt"));
        fs::write(&path, ablation_text(&rows)).map_err(io_err(&path))?;
        self.finish(&format!("ablate-{name}"), start)?;
        Ok(rows)
    }

    /// Every stage from data to report.
    pub fn run_all(&self, synth_seed: u64) -> Result<MetricsReport> {
        if matches!(self.config.data, DataSource::Synth(_)) {
            self.synth(synth_seed)?;
        }
        for kind in PipelineKind::ALL {
            self.train(kind)?;
            self.score(kind)?;
        }
        self.fuse()?;
        let report = self.eval()?;
        self.report()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::SlotFeatures;

    fn rows(kind: PipelineKind, a: &[(i64, Split, Option<f64>)]) -> Vec<DayScoreRow> {
        a.iter()
            .map(|&(date_index, split, a_d)| DayScoreRow {
                patient_id: "P".into(),
                date_index,
                split,
                windows: 1,
                u_d: a_d,
                a_d,
                decision: None,
                pipeline: kind,
                v_time: None,
                v_sleep: None,
                combined: None,
            })
            .collect()
    }

    #[test]
    fn unit_seeds_differ_by_patient() {
        assert_ne!(unit_seed(0, "P01"), unit_seed(0, "P02"));
        assert_eq!(unit_seed(3, "P01"), unit_seed(3, "P01"));
    }

    #[test]
    fn masking_keeps_training_labels() {
        let day = |split, label| DayRecord {
            patient_id: "P".into(),
            date_index: 0,
            slots: (0..288).map(SlotFeatures::invalid).collect(),
            sleep_onset_min: None,
            wake_min: None,
            label,
            split,
        };
        let mut d = vec![day(Split::Train, Label::Remission), day(Split::Test, Label::Relapse)];
        mask_labels(&mut d);
        assert_eq!(d[0].label, Label::Remission);
        assert_eq!(d[1].label, Label::Unknown);
    }

    #[test]
    fn fusion_pairs_days_and_skips_unknown_labels() {
        let h = rows(
            PipelineKind::Forecast,
            &[
                (0, Split::Val, Some(1.0)),
                (1, Split::Val, Some(0.0)),
                (2, Split::Val, None),
            ],
        );
        let s = rows(
            PipelineKind::Multitask,
            &[(0, Split::Val, Some(0.5)), (2, Split::Val, Some(0.2))],
        );
        let mut labels = HashMap::new();
        labels.insert(("P".to_string(), 0), Label::Relapse);
        labels.insert(("P".to_string(), 1), Label::Unknown);
        labels.insert(("P".to_string(), 2), Label::Remission);
        let f = fusion_days(&h, &s, &labels, Split::Val);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].a_heart, vec![Some(1.0), None]);
        assert_eq!(f[0].a_sleep, vec![Some(0.5), Some(0.2)]);
        assert_eq!(f[0].labels, vec![true, false]);
    }

    #[test]
    fn fused_rows_pass_single_scores_through() {
        let h = rows(
            PipelineKind::Forecast,
            &[(0, Split::Test, Some(1.0)), (1, Split::Test, None)],
        );
        let s = rows(
            PipelineKind::Multitask,
            &[(0, Split::Test, Some(0.0)), (1, Split::Test, Some(-0.3))],
        );
        let pick = FusionPick {
            alpha: Some(0.7),
            tau: -0.1,
            val_avg: None,
        };
        let choice = FusionChoice {
            primary: FusionKind::Weighted,
            weighted: pick,
            max: pick,
            min: pick,
        };
        let f = fused_rows(&h, &s, &choice);
        assert!((f[0].fused.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(f[0].decision, Some(1));
        assert_eq!(f[1].fused, Some(-0.3));
        assert_eq!(f[1].decision, Some(0));
    }

    #[test]
    fn fixed_tau_is_respected() {
        let val = vec![FusionDays {
            patient_id: "P".into(),
            a_heart: vec![Some(1.0), Some(-1.0)],
            a_sleep: vec![Some(0.0), Some(0.0)],
            labels: vec![true, false],
        }];
        let p = choose_tau(&val, FusionMode::Max, Some(0.3), &[0.0]);
        assert_eq!(p.tau, 0.3);
        let p = choose_tau(&val, FusionMode::Max, None, &[-0.5, 0.2, 0.0]);
        assert_eq!(p.tau, 0.0);
        assert_eq!(p.val_avg, Some(1.0));
    }

    #[test]
    fn exit_codes() {
        let so = PipelineError::StageOrder {
            path: "x".into(),
            hint: String::new(),
        };
        assert_eq!(so.exit_code(), 3);
        assert_eq!(PipelineError::from(ConfigError::new("a", "b")).exit_code(), 2);
        assert_eq!(PipelineError::from(DataError::Format("x".into())).exit_code(), 4);
    }

    #[test]
    fn ablation_grids() {
        let c = ExperimentConfig::smoke();
        let s = ablation_configs(&c, AblationAxis::Stride);
        assert_eq!(
            s.iter().map(|(v, _)| v.as_str()).collect::<Vec<_>>(),
            ["12", "24", "36", "48"]
        );
        assert!(s
            .iter()
            .all(|(v, c)| c.forecast.stride.to_string() == *v && c.multitask.stride.to_string() == *v));
        let p = ablation_configs(&c, AblationAxis::Posenc);
        assert_eq!(
            p.iter().map(|(v, _)| v.as_str()).collect::<Vec<_>>(),
            ["sinusoidal", "rope", "alibi"]
        );
    }
}
