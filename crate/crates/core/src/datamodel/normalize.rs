use serde::{Deserialize, Serialize};

use super::{DataError, DayRecord, Label, Split, CARDIAC_DIM, CARDIAC_OFFSET, INPUT_DIM, N_CHANNELS};

const MIN_STD: f64 = 1e-8;

/// Per-channel training statistics of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
    /// Channels with no finite training value; imputed with 0.
    pub missing: [bool; N_CHANNELS],
}

impl ChannelStats {
    /// Population mean and standard deviation over finite values of valid
    /// slots.
    pub fn fit(days: &[DayRecord]) -> Self {
        let mut sum = [0.0; N_CHANNELS];
        let mut count = [0usize; N_CHANNELS];
        let finite = || days.iter().flat_map(|d| d.slots.iter()).filter(|s| s.valid);
        for s in finite() {
            for (c, v) in s.channels().into_iter().enumerate() {
                if v.is_finite() {
                    sum[c] += v;
                    count[c] += 1;
                }
            }
        }
        let mean: [f64; N_CHANNELS] =
            std::array::from_fn(|c| if count[c] > 0 { sum[c] / count[c] as f64 } else { 0.0 });
        let mut ss = [0.0; N_CHANNELS];
        for s in finite() {
            for (c, v) in s.channels().into_iter().enumerate() {
                if v.is_finite() {
                    ss[c] += (v - mean[c]).powi(2);
                }
            }
        }
        Self {
            mean,
            std: std::array::from_fn(|c| {
                if count[c] > 0 {
                    (ss[c] / count[c] as f64).sqrt()
                } else {
                    0.0
                }
            }),
            missing: std::array::from_fn(|c| count[c] == 0),
        }
    }

    pub fn z(&self, channel: usize, value: f64) -> f64 {
        if self.missing[channel] || !value.is_finite() {
            return 0.0;
        }
        let centred = value - self.mean[channel];
        if self.std[channel] < MIN_STD {
            centred
        } else {
            centred / self.std[channel]
        }
    }

    pub fn apply(&self, day: &DayRecord) -> NormalizedDay {
        let mut features = Vec::with_capacity(day.slots.len());
        let mut target_valid = Vec::with_capacity(day.slots.len());
        for s in &day.slots {
            let ch = s.channels();
            let all_finite = ch.iter().all(|v| v.is_finite());
            let mut row = [0.0; INPUT_DIM];
            for (c, &v) in ch.iter().enumerate() {
                row[c] = self.z(c, v);
            }
            row[N_CHANNELS] = f64::from(u8::from(s.valid));
            row[N_CHANNELS + 1] = f64::from(u8::from(s.valid && all_finite));
            features.push(row);
            target_valid.push(s.valid && s.cardiac().iter().all(|v| v.is_finite()));
        }
        NormalizedDay {
            patient_id: day.patient_id.clone(),
            date_index: day.date_index,
            label: day.label,
            split: day.split,
            sleep_onset_min: day.sleep_onset_min,
            wake_min: day.wake_min,
            features,
            target_valid,
        }
    }
}

/// A day after z-scoring, with the two mask indicators appended to every
/// slot.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDay {
    pub patient_id: String,
    pub date_index: i64,
    pub label: Label,
    pub split: Split,
    pub sleep_onset_min: Option<f64>,
    pub wake_min: Option<f64>,
    pub features: Vec<[f64; INPUT_DIM]>,
    /// Slot is valid and its cardiac vector fully observed.
    pub target_valid: Vec<bool>,
}

impl NormalizedDay {
    pub fn cardiac(&self, slot: usize) -> Option<[f64; CARDIAC_DIM]> {
        self.target_valid[slot].then(|| std::array::from_fn(|i| self.features[slot][CARDIAC_OFFSET + i]))
    }
}

/// Z-scores every day of `all_days` with statistics fitted on `train_days`
/// only.
pub fn normalize_features(
    train_days: &[DayRecord],
    all_days: &[DayRecord],
) -> Result<(Vec<NormalizedDay>, ChannelStats), DataError> {
    if train_days.is_empty() {
        return Err(DataError::RejectedInput("no training days to fit normalization".into()));
    }
    let stats = ChannelStats::fit(train_days);
    for (c, name) in super::CHANNEL_NAMES.iter().enumerate() {
        if stats.missing[c] {
            log::warn!(
                "{}: channel {name} has no valid training bins",
                train_days[0].patient_id
            );
        }
    }
    Ok((all_days.iter().map(|d| stats.apply(d)).collect(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{SlotFeatures, SLOTS_PER_DAY};

    fn day(date: i64, split: Split, hr: impl Fn(usize) -> f64) -> DayRecord {
        let slots = (0..SLOTS_PER_DAY)
            .map(|i| SlotFeatures {
                slot_index: i,
                accel_norm: 1.0,
                gyro_norm: 0.5,
                hr_mean: hr(i),
                rr_mean: 60_000.0 / hr(i),
                rmssd: 40.0,
                sdnn: 50.0,
                hf_lomb_power: 300.0,
                steps: 0.0,
                valid: true,
            })
            .collect();
        DayRecord {
            patient_id: "p".into(),
            date_index: date,
            slots,
            sleep_onset_min: None,
            wake_min: None,
            label: Label::Remission,
            split,
        }
    }

    #[test]
    fn z_score_of_known_stats() {
        let stats = ChannelStats {
            mean: [60.0; N_CHANNELS],
            std: [10.0; N_CHANNELS],
            missing: [false; N_CHANNELS],
        };
        assert_eq!(stats.z(7, 70.0), 1.0);
    }

    #[test]
    fn constant_channel_is_centred_only() {
        let d = day(0, Split::Train, |_| 60.0);
        let (norm, stats) = normalize_features(std::slice::from_ref(&d), std::slice::from_ref(&d)).unwrap();
        assert!(stats.std[0] < MIN_STD);
        assert!(norm[0]
            .features
            .iter()
            .all(|r| r[..N_CHANNELS].iter().all(|&v| v == 0.0)));
        assert!(norm[0]
            .features
            .iter()
            .all(|r| r[N_CHANNELS] == 1.0 && r[N_CHANNELS + 1] == 1.0));
    }

    /// Three-day fixture recomputed by hand: two training days at HR 60 and
    /// 80 give mean 70 and population std 10; a validation day at 90 maps
    /// to 2.
    #[test]
    fn validation_uses_training_statistics() {
        let train = [day(0, Split::Train, |_| 60.0), day(1, Split::Train, |_| 80.0)];
        let val = day(2, Split::Val, |i| if i % 2 == 0 { 90.0 } else { 50.0 });
        let all = [train[0].clone(), train[1].clone(), val];
        let (norm, stats) = normalize_features(&train, &all).unwrap();
        assert!((stats.mean[7] - 70.0).abs() < 1e-12);
        assert!((stats.std[7] - 10.0).abs() < 1e-12);
        let table: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 1.0], [2.0, -2.0]];
        for (d, row) in norm.iter().zip(table) {
            assert!((d.features[0][7] - row[0]).abs() < 1e-12);
            assert!((d.features[1][7] - row[1]).abs() < 1e-12);
        }
        let with_val = ChannelStats::fit(&all);
        assert_ne!(with_val, stats);
    }

    #[test]
    fn missing_values_impute_to_zero_and_drop_targets() {
        let mut d = day(0, Split::Train, |i| 60.0 + i as f64 % 7.0);
        d.slots[3] = SlotFeatures::invalid(3);
        d.slots[4].rmssd = f64::NAN;
        let (norm, _) = normalize_features(std::slice::from_ref(&d), &[d.clone()]).unwrap();
        let n = &norm[0];
        assert!(n.features[3][..N_CHANNELS].iter().all(|&v| v == 0.0));
        assert_eq!(&n.features[3][N_CHANNELS..], &[0.0, 0.0]);
        assert_eq!(&n.features[4][N_CHANNELS..], &[1.0, 0.0]);
        assert_eq!(n.features[4][4], 0.0);
        assert!(n.cardiac(3).is_none() && n.cardiac(4).is_none() && n.cardiac(5).is_some());
    }

    #[test]
    fn channel_without_training_values_is_flagged() {
        let mut d = day(0, Split::Train, |_| 60.0);
        for s in &mut d.slots {
            s.hf_lomb_power = f64::NAN;
        }
        let (_, stats) = normalize_features(std::slice::from_ref(&d), &[d.clone()]).unwrap();
        assert!(stats.missing[6] && !stats.missing[7]);
        assert!(normalize_features(&[], &[d]).is_err());
    }
}
