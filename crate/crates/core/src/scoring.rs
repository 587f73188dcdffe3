//! Healthy-distribution normalization, thresholding, late fusion and
//! ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Surrogate magnitude for scores against a constant training distribution.
pub const DEGENERATE_SCORE: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("need at least 2 scorable training days, got {0}")]
    TooFewDays(usize),
    #[error("training scores are constant ({0}); use HealthyDistribution::fit_with_fallback")]
    Degenerate(f64),
    #[error("invalid scoring argument: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthyDistribution {
    pub mu_dist: f64,
    pub max_dist: f64,
    pub min_dist: f64,
}

impl HealthyDistribution {
    pub fn is_degenerate(&self) -> bool {
        self.max_dist == self.min_dist
    }

    /// As [`fit_healthy`] but accepts constant scores.
    pub fn fit_with_fallback(scores: &[f64]) -> Result<Self, ScoringError> {
        match fit_healthy(scores) {
            Err(ScoringError::Degenerate(v)) => Ok(Self {
                mu_dist: v,
                max_dist: v,
                min_dist: v,
            }),
            r => r,
        }
    }
}

/// Empirical mean, maximum and minimum of training-day scores.
pub fn fit_healthy(scores: &[f64]) -> Result<HealthyDistribution, ScoringError> {
    if scores.len() < 2 {
        return Err(ScoringError::TooFewDays(scores.len()));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(ScoringError::InvalidArgument(format!("non-finite training score {v}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Err(ScoringError::Degenerate(max));
    }
    let mu = (scores.iter().sum::<f64>() / scores.len() as f64).clamp(min, max);
    Ok(HealthyDistribution {
        mu_dist: mu,
        max_dist: max,
        min_dist: min,
    })
}

/// `A_d = (U_d − μ) / (max − min)`; a degenerate distribution maps to 0 at
/// `μ` and `±1e6` elsewhere.
pub fn anomaly_score(u_d: f64, dist: &HealthyDistribution) -> f64 {
    if dist.is_degenerate() {
        if u_d == dist.mu_dist {
            return 0.0;
        }
        log::warn!("degenerate healthy distribution; clamping anomaly score");
        return DEGENERATE_SCORE.copysign(u_d - dist.mu_dist);
    }
    (u_d - dist.mu_dist) / (dist.max_dist - dist.min_dist)
}

/// 1 iff `a > tau`.
pub fn classify(a: f64, tau: f64) -> u8 {
    u8::from(a > tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum FusionMode {
    Weighted { alpha: f64 },
    Max,
    Min,
}

impl FusionMode {
    pub fn label(&self) -> String {
        match self {
            Self::Weighted { alpha } => format!("weighted(alpha={alpha})"),
            Self::Max => "max".into(),
            Self::Min => "min".into(),
        }
    }
}

/// Combines the two continuous scores; a day scored by one pipeline only
/// passes that score through.
pub fn fuse(a_heart: Option<f64>, a_sleep: Option<f64>, mode: FusionMode) -> Option<f64> {
    match (a_heart, a_sleep) {
        (Some(h), Some(s)) => Some(match mode {
            FusionMode::Weighted { alpha } => alpha * h + (1.0 - alpha) * s,
            FusionMode::Max => h.max(s),
            FusionMode::Min => h.min(s),
        }),
        (Some(v), None) | (None, Some(v)) => {
            log::debug!("day scored by a single pipeline; passing its score through");
            Some(v)
        }
        (None, None) => None,
    }
}

/// Pairwise concordance with ties counted one half; `None` unless both
/// classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks of tied groups; the positive rank sum gives the U statistic.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `Σ (R_i − R_{i−1}) · P_i` over a descending sweep of distinct scores;
/// `None` without positives.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub avg: Option<f64>,
}

pub fn metric_set(scores: &[f64], labels: &[bool]) -> MetricSet {
    let auroc = auroc(scores, labels);
    let auprc = auprc(scores, labels);
    MetricSet {
        auroc,
        auprc,
        avg: auroc.zip(auprc).map(|(a, b)| (a + b) / 2.0),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Unweighted mean of per-patient metrics.
    #[default]
    PerPatient,
    /// Metrics over all patients' days at once.
    Pooled,
}

/// Day-level scores and labels of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientScores {
    pub patient_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_patient: BTreeMap<String, MetricSet>,
    pub aggregate: MetricSet,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-patient metrics and their aggregate for one run. Patients whose
/// metric is undefined are left out of that metric's mean.
pub fn evaluate_run(patients: &[PatientScores], aggregation: Aggregation) -> RunMetrics {
    let per_patient: BTreeMap<String, MetricSet> = patients
        .iter()
        .map(|p| (p.patient_id.clone(), metric_set(&p.scores, &p.labels)))
        .collect();
    let aggregate = match aggregation {
        Aggregation::PerPatient => MetricSet {
            auroc: mean_of(per_patient.values().map(|m| m.auroc)),
            auprc: mean_of(per_patient.values().map(|m| m.auprc)),
            avg: mean_of(per_patient.values().map(|m| m.avg)),
        },
        Aggregation::Pooled => {
            let scores: Vec<f64> = patients.iter().flat_map(|p| p.scores.iter().copied()).collect();
            let labels: Vec<bool> = patients.iter().flat_map(|p| p.labels.iter().copied()).collect();
            metric_set(&scores, &labels)
        }
    };
    RunMetrics { per_patient, aggregate }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auroc: Option<MeanStd>,
    pub auprc: Option<MeanStd>,
    pub avg: Option<MeanStd>,
}

impl MetricSummary {
    pub fn of(sets: &[MetricSet]) -> Self {
        let col = |f: fn(&MetricSet) -> Option<f64>| mean_std(&sets.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            auroc: col(|m| m.auroc),
            auprc: col(|m| m.auprc),
            avg: col(|m| m.avg),
        }
    }
}

/// Mean and spread over seeds of the aggregate and per-patient metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub aggregate: MetricSummary,
    pub per_patient: BTreeMap<String, MetricSummary>,
}

pub fn summarize_runs(runs: &[RunMetrics]) -> SeedSummary {
    let aggregate = MetricSummary::of(&runs.iter().map(|r| r.aggregate).collect::<Vec<_>>());
    let mut per: BTreeMap<String, Vec<MetricSet>> = BTreeMap::new();
    for r in runs {
        for (p, m) in &r.per_patient {
            per.entry(p.clone()).or_default().push(*m);
        }
    }
    SeedSummary {
        aggregate,
        per_patient: per.into_iter().map(|(p, v)| (p, MetricSummary::of(&v))).collect(),
    }
}

/// Validation inputs for the fusion grid of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionDays {
    pub patient_id: String,
    pub a_heart: Vec<Option<f64>>,
    pub a_sleep: Vec<Option<f64>>,
    pub labels: Vec<bool>,
}

/// Per-patient-mean AVG of thresholded fused decisions.
pub fn decision_avg(patients: &[FusionDays], mode: FusionMode, tau: f64) -> Option<f64> {
    mean_of(patients.iter().map(|p| {
        let (mut d, mut l) = (Vec::new(), Vec::new());
        for i in 0..p.labels.len() {
            if let Some(f) = fuse(p.a_heart[i], p.a_sleep[i], mode) {
                d.push(f64::from(classify(f, tau)));
                l.push(p.labels[i]);
            }
        }
        metric_set(&d, &l).avg
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub alpha: f64,
    pub tau: f64,
    pub avg: f64,
}

/// Exhaustive search of weighted fusion over `alphas × taus`, keeping the
/// first best in order of ascending `α`, then ascending `|τ|`.
pub fn grid_search_alpha(patients: &[FusionDays], alphas: &[f64], taus: &[f64]) -> Result<GridChoice, ScoringError> {
    if alphas.is_empty() || taus.is_empty() {
        return Err(ScoringError::InvalidArgument("empty search grid".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(ScoringError::InvalidArgument(format!("alpha {a} outside [0, 1]")));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    let mut taus = taus.to_vec();
    taus.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut best: Option<GridChoice> = None;
    for &alpha in &alphas {
        for &tau in &taus {
            let Some(avg) = decision_avg(patients, FusionMode::Weighted { alpha }, tau) else {
                continue;
            };
            if best.is_none_or(|b| avg > b.avg) {
                best = Some(GridChoice { alpha, tau, avg });
            }
        }
    }
    best.ok_or_else(|| ScoringError::InvalidArgument("validation lacks both labels for every patient".into()))
}

/// `{start, start + step, …, end}` with rounding to the step's decimals.
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as i64;
    (0..=n)
        .map(|i| ((start + step * i as f64) * 1e9).round() / 1e9)
        .collect()
}

pub fn default_alpha_grid() -> Vec<f64> {
    grid(0.0, 1.0, 0.1)
}

pub fn default_tau_grid() -> Vec<f64> {
    grid(-0.5, 0.5, 0.1)
}
