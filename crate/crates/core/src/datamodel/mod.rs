//! Five-minute slot features, day records, feature normalization and
//! sliding-window generation.

mod features;
mod io;
mod normalize;
mod raw;
mod windows;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{lomb_scargle, rr_features, RrFeatures, LOMB_GRID_LEN, LOMB_GRID_MAX_HZ, LOMB_GRID_MIN_HZ};
pub use io::{days_from_raw, read_days, write_days};
pub use normalize::{normalize_features, ChannelStats, NormalizedDay};
pub use raw::{aggregate_raw, read_raw_samples, RawChannel, RawSample};
pub use windows::{make_windows, time_embedding, window_count, TimeEmbedding, Window};

pub const SLOTS_PER_DAY: usize = 288;
pub const SLOT_MINUTES: f64 = 5.0;
pub const MINUTES_PER_DAY: f64 = 1440.0;
/// Numeric channels per slot.
pub const N_CHANNELS: usize = 8;
/// Channels plus the two mask indicators.
pub const INPUT_DIM: usize = N_CHANNELS + 2;
pub const CARDIAC_DIM: usize = 5;
/// Offset of the cardiac block inside the channel vector.
pub const CARDIAC_OFFSET: usize = 3;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "accel_norm",
    "gyro_norm",
    "steps",
    "rr_mean",
    "rmssd",
    "sdnn",
    "hf_lomb_power",
    "hr_mean",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("rejected input: {0}")]
    RejectedInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    #[default]
    Remission,
    Relapse,
    Unknown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// One five-minute bin. Missing channels hold `NaN`; an invalid bin has
/// every channel `NaN`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotFeatures {
    pub slot_index: usize,
    pub accel_norm: f64,
    pub gyro_norm: f64,
    pub hr_mean: f64,
    pub rr_mean: f64,
    pub rmssd: f64,
    pub sdnn: f64,
    pub hf_lomb_power: f64,
    pub steps: f64,
    pub valid: bool,
}

impl SlotFeatures {
    pub fn invalid(slot_index: usize) -> Self {
        Self {
            slot_index,
            accel_norm: f64::NAN,
            gyro_norm: f64::NAN,
            hr_mean: f64::NAN,
            rr_mean: f64::NAN,
            rmssd: f64::NAN,
            sdnn: f64::NAN,
            hf_lomb_power: f64::NAN,
            steps: f64::NAN,
            valid: false,
        }
    }

    /// Channels in input order: activity block then the cardiac vector.
    pub fn channels(&self) -> [f64; N_CHANNELS] {
        [
            self.accel_norm,
            self.gyro_norm,
            self.steps,
            self.rr_mean,
            self.rmssd,
            self.sdnn,
            self.hf_lomb_power,
            self.hr_mean,
        ]
    }

    /// `(rr_mean, rmssd, sdnn, hf_lomb_power, hr_mean)`.
    pub fn cardiac(&self) -> [f64; CARDIAC_DIM] {
        [self.rr_mean, self.rmssd, self.sdnn, self.hf_lomb_power, self.hr_mean]
    }

    pub fn set_channel(&mut self, index: usize, value: f64) {
        match index {
            0 => self.accel_norm = value,
            1 => self.gyro_norm = value,
            2 => self.steps = value,
            3 => self.rr_mean = value,
            4 => self.rmssd = value,
            5 => self.sdnn = value,
            6 => self.hf_lomb_power = value,
            7 => self.hr_mean = value,
            _ => panic!("channel index {index} out of range"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub patient_id: String,
    pub date_index: i64,
    pub slots: Vec<SlotFeatures>,
    pub sleep_onset_min: Option<f64>,
    pub wake_min: Option<f64>,
    pub label: Label,
    pub split: Split,
}

impl DayRecord {
    /// Checks slot count, ordering and the training-label rule.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.slots.len() != SLOTS_PER_DAY {
            return Err(DataError::Format(format!(
                "{} day {}: expected {SLOTS_PER_DAY} slots, found {}",
                self.patient_id,
                self.date_index,
                self.slots.len()
            )));
        }
        if let Some(i) = self.slots.iter().enumerate().position(|(i, s)| s.slot_index != i) {
            return Err(DataError::Format(format!(
                "{} day {}: slot {i} out of order",
                self.patient_id, self.date_index
            )));
        }
        if self.split == Split::Train && self.label != Label::Remission {
            return Err(DataError::Format(format!(
                "{} day {}: training days must be labelled remission",
                self.patient_id, self.date_index
            )));
        }
        for m in [self.sleep_onset_min, self.wake_min].into_iter().flatten() {
            if !(0.0..MINUTES_PER_DAY).contains(&m) {
                return Err(DataError::Format(format!(
                    "{} day {}: sleep time {m} outside [0, 1440)",
                    self.patient_id, self.date_index
                )));
            }
        }
        Ok(())
    }
}
