//! Synthetic patients: circadian remission baselines with injectable
//! relapse regimes, emitted as day records.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DayRecord, Label, SlotFeatures, Split, MINUTES_PER_DAY, SLOTS_PER_DAY, SLOT_MINUTES};
use crate::training::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid profile {0}: {1}")]
    Profile(String, String),
    #[error("invalid relapse regime: {0}")]
    Regime(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: String,
    pub base_hr: f64,
    /// Resting RMSSD (ms).
    pub hrv_level: f64,
    /// Circadian HR amplitude (bpm).
    pub circadian_amplitude: f64,
    /// Hour of the circadian HR peak.
    pub circadian_phase_h: f64,
    /// Mean steps per waking five-minute bin.
    pub activity_level: f64,
    pub sleep_onset_mean_min: f64,
    pub sleep_onset_jitter_min: f64,
    pub wake_mean_min: f64,
    pub wake_jitter_min: f64,
    /// HR noise (bpm).
    pub hr_noise: f64,
    /// Log-scale noise of HRV and activity channels.
    pub feature_noise: f64,
    /// Probability that a bin is missing.
    pub missing_prob: f64,
    /// Spread of the daily HR offset (bpm).
    pub day_hr_sd: f64,
    /// Log-scale spread of the daily HRV and activity multipliers.
    pub day_log_sd: f64,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Profile(self.patient_id.clone(), m.into()));
        let positive = [
            self.base_hr,
            self.hrv_level,
            self.circadian_amplitude,
            self.activity_level,
            self.sleep_onset_jitter_min,
            self.wake_jitter_min,
            self.hr_noise,
            self.feature_noise,
            self.day_hr_sd,
            self.day_log_sd,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return err("scales must be positive");
        }
        let day = 0.0..MINUTES_PER_DAY;
        if !day.contains(&self.sleep_onset_mean_min) || !day.contains(&self.wake_mean_min) {
            return err("sleep times must lie in [0, 1440)");
        }
        let duration = (self.wake_mean_min - self.sleep_onset_mean_min).rem_euclid(MINUTES_PER_DAY);
        if !(120.0..=840.0).contains(&duration) {
            return err("sleep window must last between 2 and 14 hours");
        }
        if !(0.0..0.5).contains(&self.missing_prob) {
            return err("missing_prob must be in [0, 0.5)");
        }
        Ok(())
    }
}

/// Eight profiles spanning resting HR, HRV and chronotype.
pub fn default_profiles() -> Vec<PatientProfile> {
    let rows: [(f64, f64, f64, f64, f64, f64, f64); 8] = [
        (62.0, 48.0, 8.0, 15.0, 60.0, 1380.0, 420.0),
        (70.0, 38.0, 7.0, 16.0, 75.0, 1410.0, 450.0),
        (58.0, 60.0, 9.0, 14.5, 50.0, 1350.0, 390.0),
        (76.0, 30.0, 6.0, 16.5, 85.0, 0.0, 480.0),
        (66.0, 44.0, 8.5, 15.5, 65.0, 1395.0, 405.0),
        (80.0, 26.0, 5.5, 17.0, 45.0, 30.0, 510.0),
        (64.0, 52.0, 10.0, 14.0, 90.0, 1365.0, 375.0),
        (72.0, 34.0, 7.5, 15.0, 55.0, 1425.0, 465.0),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(hr, hrv, amp, phase, act, onset, wake))| PatientProfile {
            patient_id: format!("P{:02}", i + 1),
            base_hr: hr,
            hrv_level: hrv,
            circadian_amplitude: amp,
            circadian_phase_h: phase,
            activity_level: act,
            sleep_onset_mean_min: onset,
            sleep_onset_jitter_min: 25.0,
            wake_mean_min: wake,
            wake_jitter_min: 20.0,
            hr_noise: 2.5,
            feature_noise: 0.15,
            missing_prob: 0.03,
            day_hr_sd: 3.0,
            day_log_sd: 0.15,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelapseRegime {
    /// Affected `date_index` range, end exclusive.
    pub start_day: i64,
    pub end_day: i64,
    /// Multiplier on RMSSD and SDNN; HF power scales with its square.
    pub hrv_suppression: f64,
    pub hr_elevation: f64,
    pub sleep_shift_min: f64,
    /// Probability that a sleeping bin turns restless.
    pub fragmentation_prob: f64,
    /// Log-scale spread of a day's activity multipliers.
    pub activity_irregularity: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Subtle,
    #[default]
    Moderate,
    Severe,
}

impl Severity {
    /// Regime over `[start, end)` at this severity.
    pub fn regime(self, start_day: i64, end_day: i64) -> RelapseRegime {
        let (hrv, hr, shift, frag, irr) = match self {
            Self::Subtle => (0.85, 3.0, 30.0, 0.05, 0.2),
            Self::Moderate => (0.7, 6.0, 75.0, 0.15, 0.4),
            Self::Severe => (0.5, 10.0, 120.0, 0.3, 0.7),
        };
        RelapseRegime {
            start_day,
            end_day,
            hrv_suppression: hrv,
            hr_elevation: hr,
            sleep_shift_min: shift,
            fragmentation_prob: frag,
            activity_irregularity: irr,
        }
    }
}

impl RelapseRegime {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Regime(m.into()));
        if self.end_day <= self.start_day {
            return err("empty day range");
        }
        if !(self.hrv_suppression > 0.0 && self.hrv_suppression <= 1.0) {
            return err("hrv_suppression must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.fragmentation_prob) || self.activity_irregularity < 0.0 {
            return err("fragmentation_prob must lie in [0, 1] and irregularity be non-negative");
        }
        let neutral = self.hrv_suppression == 1.0
            && self.hr_elevation == 0.0
            && self.sleep_shift_min == 0.0
            && self.fragmentation_prob == 0.0
            && self.activity_irregularity == 0.0;
        if neutral {
            return err("regime has no effect");
        }
        Ok(())
    }

    fn overlaps(&self, other: &Self) -> bool {
        self.start_day < other.end_day && other.start_day < self.end_day
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Student-t with 3 degrees of freedom, rescaled to unit variance.
    HeavyTailed,
}

struct Noise {
    kind: NoiseKind,
    normal: Normal<f64>,
    t: StudentT<f64>,
}

impl Noise {
    fn new(kind: NoiseKind) -> Self {
        Self {
            kind,
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
            t: StudentT::new(3.0).expect("t(3)"),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Gaussian => self.normal.sample(rng),
            NoiseKind::HeavyTailed => self.t.sample(rng) / 3f64.sqrt(),
        }
    }
}

/// `true` when minute `m` lies in the circular interval `[onset, wake)`.
fn asleep(m: f64, onset: f64, wake: f64) -> bool {
    if onset <= wake {
        (onset..wake).contains(&m)
    } else {
        m >= onset || m < wake
    }
}

fn slot_minute(i: usize) -> f64 {
    i as f64 * SLOT_MINUTES + SLOT_MINUTES / 2.0
}

fn generate_day<R: Rng + ?Sized>(
    p: &PatientProfile,
    date_index: i64,
    split: Split,
    noise: &Noise,
    rng: &mut R,
) -> DayRecord {
    let onset = (p.sleep_onset_mean_min + p.sleep_onset_jitter_min * noise.draw(rng)).rem_euclid(MINUTES_PER_DAY);
    let wake = (p.wake_mean_min + p.wake_jitter_min * noise.draw(rng)).rem_euclid(MINUTES_PER_DAY);
    let day_hr = p.day_hr_sd * noise.draw(rng);
    let day_hrv = (p.day_log_sd * noise.draw(rng)).exp();
    let day_activity = (2.0 * p.day_log_sd * noise.draw(rng)).exp();
    let gap = if rng.random_bool(0.3) {
        let len = rng.random_range(1..=12);
        let start = rng.random_range(0..SLOTS_PER_DAY - len);
        start..start + len
    } else {
        0..0
    };
    let slots = (0..SLOTS_PER_DAY)
        .map(|i| {
            if gap.contains(&i) || rng.random_bool(p.missing_prob) {
                return SlotFeatures::invalid(i);
            }
            let m = slot_minute(i);
            let sleeping = asleep(m, onset, wake);
            let circadian = p.circadian_amplitude * (TAU * (m / 60.0 - p.circadian_phase_h) / 24.0).cos();
            let steps = if sleeping {
                if rng.random_bool(0.03) {
                    rng.random_range(0.0..10.0f64).round()
                } else {
                    0.0
                }
            } else {
                (p.activity_level * day_activity * (p.feature_noise * 3.0 * noise.draw(rng)).exp()).round()
            };
            let hr = (p.base_hr + day_hr + circadian - if sleeping { 8.0 } else { 0.0 }
                + 0.06 * steps
                + p.hr_noise * noise.draw(rng))
            .max(35.0);
            let rr_mean = 60_000.0 / hr * (1.0 + 0.01 * noise.draw(rng));
            let hrv_scale = (p.base_hr / hr) * if sleeping { 1.25 } else { 1.0 };
            let rmssd = p.hrv_level * day_hrv * hrv_scale * (p.feature_noise * noise.draw(rng)).exp();
            let sdnn = 1.3 * rmssd * (p.feature_noise * noise.draw(rng)).exp();
            let hf = 0.5 * rmssd * rmssd * (p.feature_noise * 2.0 * noise.draw(rng)).exp();
            let accel = 1.0 + 0.004 * steps + 0.02 * noise.draw(rng).abs();
            let gyro = 0.05 + 0.002 * steps + 0.01 * noise.draw(rng).abs();
            SlotFeatures {
                slot_index: i,
                accel_norm: accel,
                gyro_norm: gyro,
                hr_mean: hr,
                rr_mean,
                rmssd,
                sdnn,
                hf_lomb_power: hf,
                steps,
                valid: true,
            }
        })
        .collect();
    DayRecord {
        patient_id: p.patient_id.clone(),
        date_index,
        slots,
        sleep_onset_min: Some(onset),
        wake_min: Some(wake),
        label: Label::Remission,
        split,
    }
}

/// Consecutive train, validation and test days, all in remission.
pub fn generate_patient(
    profile: &PatientProfile,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    noise: NoiseKind,
) -> Result<Vec<DayRecord>, SynthError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Noise::new(noise);
    let splits = std::iter::repeat_n(Split::Train, n_train)
        .chain(std::iter::repeat_n(Split::Val, n_val))
        .chain(std::iter::repeat_n(Split::Test, n_test));
    Ok(splits
        .enumerate()
        .map(|(d, split)| generate_day(profile, d as i64, split, &noise, &mut rng))
        .collect())
}

fn shift_day(day: &mut DayRecord, shift_min: f64) {
    let k = (shift_min / SLOT_MINUTES).round() as i64;
    let n = SLOTS_PER_DAY as i64;
    let old = day.slots.clone();
    for (i, slot) in day.slots.iter_mut().enumerate() {
        let src = (i as i64 - k).rem_euclid(n) as usize;
        *slot = SlotFeatures {
            slot_index: i,
            ..old[src]
        };
    }
    let shifted = k as f64 * SLOT_MINUTES;
    day.sleep_onset_min = day.sleep_onset_min.map(|m| (m + shifted).rem_euclid(MINUTES_PER_DAY));
    day.wake_min = day.wake_min.map(|m| (m + shifted).rem_euclid(MINUTES_PER_DAY));
}

fn apply_regime<R: Rng + ?Sized>(day: &mut DayRecord, r: &RelapseRegime, noise: &Noise, rng: &mut R) {
    if r.sleep_shift_min != 0.0 {
        shift_day(day, r.sleep_shift_min);
    }
    let irregular = (r.activity_irregularity * noise.draw(rng)).exp();
    let (onset, wake) = (day.sleep_onset_min, day.wake_min);
    for s in day.slots.iter_mut().filter(|s| s.valid) {
        let sleeping = matches!((onset, wake), (Some(a), Some(b)) if asleep(slot_minute(s.slot_index), a, b));
        let mut extra_steps = 0.0;
        if sleeping && rng.random_bool(r.fragmentation_prob) {
            extra_steps = rng.random_range(10.0..60.0f64).round();
        }
        let wobble = if r.activity_irregularity > 0.0 {
            irregular * (r.activity_irregularity * noise.draw(rng)).exp()
        } else {
            1.0
        };
        let steps = (s.steps * wobble).round() + extra_steps;
        let added_steps = steps - s.steps;
        s.steps = steps;
        s.accel_norm += 0.004 * added_steps;
        s.gyro_norm += 0.002 * added_steps;
        let hr_old = s.hr_mean;
        let hr = (hr_old + r.hr_elevation + 0.06 * added_steps + if extra_steps > 0.0 { 6.0 } else { 0.0 }).max(35.0);
        s.hr_mean = hr;
        s.rr_mean *= hr_old / hr;
        let hrv = r.hrv_suppression * hr_old / hr;
        s.rmssd *= hrv;
        s.sdnn *= hrv;
        s.hf_lomb_power *= hrv * hrv;
    }
    day.label = Label::Relapse;
}

/// Applies each regime to its day range. Every range must sit inside one
/// non-training split, and ranges may not overlap.
pub fn inject_relapse(days: &mut [DayRecord], regimes: &[RelapseRegime], seed: u64) -> Result<(), SynthError> {
    for (i, r) in regimes.iter().enumerate() {
        r.validate()?;
        if regimes[..i].iter().any(|o| o.overlaps(r)) {
            return Err(SynthError::Regime("overlapping regimes".into()));
        }
        let affected: Vec<&DayRecord> = days
            .iter()
            .filter(|d| (r.start_day..r.end_day).contains(&d.date_index))
            .collect();
        if affected.len() as i64 != r.end_day - r.start_day {
            return Err(SynthError::Regime(format!(
                "days {}..{} are not all present",
                r.start_day, r.end_day
            )));
        }
        let split = affected[0].split;
        if split == Split::Train || affected.iter().any(|d| d.split != split) {
            return Err(SynthError::Regime(format!(
                "days {}..{} must lie inside one validation or test split",
                r.start_day, r.end_day
            )));
        }
    }
    let noise = Noise::new(NoiseKind::Gaussian);
    for (i, r) in regimes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        for d in days
            .iter_mut()
            .filter(|d| (r.start_day..r.end_day).contains(&d.date_index))
        {
            apply_regime(d, r, &noise, &mut rng);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub profiles: Vec<PatientProfile>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub severity: Severity,
    /// Relapse days per validation and per test split.
    pub episode_days: usize,
    pub noise: NoiseKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            profiles: default_profiles(),
            n_train: 200,
            n_val: 87,
            n_test: 85,
            severity: Severity::Moderate,
            episode_days: 25,
            noise: NoiseKind::Gaussian,
        }
    }
}

/// Generates every profile with one relapse episode in the validation and
/// one in the test split.
pub fn generate_cohort(cfg: &SynthConfig, seed: u64) -> Result<Vec<DayRecord>, SynthError> {
    let mut out = Vec::new();
    for (i, p) in cfg.profiles.iter().enumerate() {
        let base = derive_seed(seed, i as u64);
        let mut days = generate_patient(p, cfg.n_train, cfg.n_val, cfg.n_test, base, cfg.noise)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, 1));
        let mut regimes = Vec::new();
        for (offset, len) in [(cfg.n_train, cfg.n_val), (cfg.n_train + cfg.n_val, cfg.n_test)] {
            if cfg.episode_days == 0 || cfg.episode_days > len {
                continue;
            }
            let slack = len - cfg.episode_days;
            let start = offset + rng.random_range(slack / 4..=slack - slack / 4);
            regimes.push(cfg.severity.regime(start as i64, (start + cfg.episode_days) as i64));
        }
        inject_relapse(&mut days, &regimes, derive_seed(base, 2))?;
        out.extend(days);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> PatientProfile {
        default_profiles().remove(0)
    }

    fn bits(days: &[DayRecord]) -> Vec<u64> {
        days.iter()
            .flat_map(|d| d.slots.iter().flat_map(|s| s.channels().map(f64::to_bits)))
            .collect()
    }

    #[test]
    fn deterministic_and_sized() {
        let a = generate_patient(&profile(), 200, 87, 85, 5, NoiseKind::Gaussian).unwrap();
        let b = generate_patient(&profile(), 200, 87, 85, 5, NoiseKind::Gaussian).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let count = |s| a.iter().filter(|d| d.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (200, 87, 85)
        );
        assert!(a.iter().all(|d| d.validate().is_ok()));
    }

    #[test]
    fn rr_and_hr_are_consistent() {
        let days = generate_patient(&profile(), 10, 0, 0, 1, NoiseKind::Gaussian).unwrap();
        for s in days.iter().flat_map(|d| &d.slots).filter(|s| s.valid) {
            assert!((s.rr_mean * s.hr_mean / 60_000.0 - 1.0).abs() < 0.1);
            assert!(s.rmssd > 0.0 && s.sdnn > 0.0 && s.hf_lomb_power > 0.0 && s.steps >= 0.0);
        }
    }

    #[test]
    fn neutral_and_overlapping_regimes_rejected() {
        let neutral = RelapseRegime {
            start_day: 0,
            end_day: 1,
            hrv_suppression: 1.0,
            hr_elevation: 0.0,
            sleep_shift_min: 0.0,
            fragmentation_prob: 0.0,
            activity_irregularity: 0.0,
        };
        assert!(neutral.validate().is_err());
        let mut days = generate_patient(&profile(), 2, 10, 0, 1, NoiseKind::Gaussian).unwrap();
        let a = Severity::Moderate.regime(3, 6);
        let b = Severity::Moderate.regime(5, 8);
        assert!(inject_relapse(&mut days, &[a, b], 0).is_err());
        assert!(inject_relapse(&mut days, &[Severity::Severe.regime(0, 3)], 0).is_err());
    }

    fn mean(v: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = v.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn hrv_suppression_halves_rmssd() {
        let clean = generate_patient(&profile(), 0, 60, 0, 3, NoiseKind::Gaussian).unwrap();
        let mut days = clean.clone();
        let regime = RelapseRegime {
            start_day: 30,
            end_day: 60,
            hrv_suppression: 0.5,
            hr_elevation: 0.0,
            sleep_shift_min: 0.0,
            fragmentation_prob: 0.0,
            activity_irregularity: 0.0,
        };
        inject_relapse(&mut days, &[regime], 4).unwrap();
        let rmssd = |d: &[DayRecord]| mean(d.iter().flat_map(|d| &d.slots).filter(|s| s.valid).map(|s| s.rmssd));
        let ratio = rmssd(&days[30..]) / rmssd(&clean[..30]);
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
        assert_eq!(bits(&days[..30]), bits(&clean[..30]));
        assert!(days[..30].iter().all(|d| d.label == Label::Remission));
        assert!(days[30..].iter().all(|d| d.label == Label::Relapse));
    }

    #[test]
    fn sleep_shift_moves_onset() {
        let clean = generate_patient(&profile(), 0, 0, 80, 8, NoiseKind::Gaussian).unwrap();
        let mut days = clean.clone();
        let regime = RelapseRegime {
            start_day: 40,
            end_day: 80,
            hrv_suppression: 1.0,
            hr_elevation: 0.0,
            sleep_shift_min: 120.0,
            fragmentation_prob: 0.0,
            activity_irregularity: 0.0,
        };
        inject_relapse(&mut days, &[regime], 1).unwrap();
        // Onsets straddle midnight, so compare on a noon-anchored clock.
        let onset = |d: &[DayRecord]| mean(d.iter().map(|d| (d.sleep_onset_min.unwrap() + 720.0) % 1440.0));
        let shift = onset(&days[40..]) - onset(&clean[..40]);
        assert!((shift - 120.0).abs() < 15.0, "{shift}");
        assert_eq!(
            days[50].slots[24].hr_mean.to_bits(),
            clean[50].slots[0].hr_mean.to_bits()
        );
    }

    #[test]
    fn cohort_keeps_training_in_remission() {
        let cfg = SynthConfig {
            profiles: default_profiles().into_iter().take(2).collect(),
            ..Default::default()
        };
        let days = generate_cohort(&cfg, 0).unwrap();
        assert_eq!(days.len(), 2 * 372);
        assert!(days
            .iter()
            .filter(|d| d.split == Split::Train)
            .all(|d| d.label == Label::Remission));
        for split in [Split::Val, Split::Test] {
            let n = days
                .iter()
                .filter(|d| d.split == split && d.label == Label::Relapse)
                .count();
            assert_eq!(n, 2 * 25);
        }
        assert_eq!(default_profiles().len(), 8);
        assert!(default_profiles().iter().all(|p| p.validate().is_ok()));
    }

    /// Two-sample Kolmogorov–Smirnov statistic of daily mean HR between
    /// remission days of the training and test splits.
    #[test]
    fn remission_is_stationary_across_splits() {
        let days = generate_patient(&profile(), 200, 87, 85, 12, NoiseKind::Gaussian).unwrap();
        let daily = |s: Split| {
            let mut v: Vec<f64> = days
                .iter()
                .filter(|d| d.split == s)
                .map(|d| mean(d.slots.iter().filter(|x| x.valid).map(|x| x.hr_mean)))
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (daily(Split::Train), daily(Split::Test));
        let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
        let d = a
            .iter()
            .chain(&b)
            .map(|&x| (cdf(&a, x) - cdf(&b, x)).abs())
            .fold(0.0, f64::max);
        assert!(d < 0.25, "KS statistic {d}");
    }

    #[test]
    fn heavy_tails_differ_from_gaussian() {
        let g = generate_patient(&profile(), 2, 0, 0, 1, NoiseKind::Gaussian).unwrap();
        let t = generate_patient(&profile(), 2, 0, 0, 1, NoiseKind::HeavyTailed).unwrap();
        assert_ne!(bits(&g), bits(&t));
    }
}
