use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{DataError, NormalizedDay, CARDIAC_DIM, INPUT_DIM, MINUTES_PER_DAY, SLOTS_PER_DAY, SLOT_MINUTES};

/// Point on the unit circle encoding a time of day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub sin_component: f64,
    pub cos_component: f64,
}

impl TimeEmbedding {
    pub fn to_array(self) -> [f64; 2] {
        [self.sin_component, self.cos_component]
    }
}

pub fn time_embedding(minutes_of_day: f64) -> Result<TimeEmbedding, DataError> {
    if !(0.0..MINUTES_PER_DAY).contains(&minutes_of_day) {
        return Err(DataError::RejectedInput(format!(
            "minute of day {minutes_of_day} outside [0, 1440)"
        )));
    }
    let (s, c) = (2.0 * PI * minutes_of_day / MINUTES_PER_DAY).sin_cos();
    Ok(TimeEmbedding {
        sin_component: s,
        cos_component: c,
    })
}

/// Windows per day: `⌊(288 − window_size) / stride⌋ + 1`.
pub fn window_count(window_size: usize, stride: usize) -> Result<usize, DataError> {
    check_geometry(window_size, stride)?;
    Ok((SLOTS_PER_DAY - window_size) / stride + 1)
}

fn check_geometry(window_size: usize, stride: usize) -> Result<(), DataError> {
    if window_size == 0 || window_size > SLOTS_PER_DAY {
        return Err(DataError::Config(format!(
            "window_size {window_size} outside [1, {SLOTS_PER_DAY}]"
        )));
    }
    if stride == 0 {
        return Err(DataError::Config("stride must be at least 1".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub date_index: i64,
    pub start: usize,
    pub len: usize,
    /// Row-major `len × INPUT_DIM`.
    pub inputs: Vec<f64>,
    /// Cardiac vector of slot `start + len`; absent past the day's end or
    /// when that slot is not fully observed.
    pub cardiac_target: Option<[f64; CARDIAC_DIM]>,
    /// Centre time of the final slot.
    pub time_target: TimeEmbedding,
    /// `(onset, wake)`; absent when the day lacks sleep annotations.
    pub sleep_target: Option<[TimeEmbedding; 2]>,
}

/// All windows of one day. Filtering on `cardiac_target` is left to the
/// caller.
pub fn make_windows(day: &NormalizedDay, window_size: usize, stride: usize) -> Result<Vec<Window>, DataError> {
    let n = window_count(window_size, stride)?;
    if day.features.len() != SLOTS_PER_DAY {
        return Err(DataError::Format(format!(
            "day {} has {} slots",
            day.date_index,
            day.features.len()
        )));
    }
    let sleep_target = match (day.sleep_onset_min, day.wake_min) {
        (Some(on), Some(wake)) => Some([time_embedding(on)?, time_embedding(wake)?]),
        _ => None,
    };
    (0..n)
        .map(|w| {
            let start = w * stride;
            let end = start + window_size;
            let mut inputs = Vec::with_capacity(window_size * INPUT_DIM);
            for row in &day.features[start..end] {
                inputs.extend_from_slice(row);
            }
            let cardiac_target = (end < SLOTS_PER_DAY).then(|| day.cardiac(end)).flatten();
            let minute = (end - 1) as f64 * SLOT_MINUTES + SLOT_MINUTES / 2.0;
            Ok(Window {
                date_index: day.date_index,
                start,
                len: window_size,
                inputs,
                cardiac_target,
                time_target: time_embedding(minute)?,
                sleep_target,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Label, Split};
    use proptest::prelude::*;

    fn close(a: TimeEmbedding, s: f64, c: f64) -> bool {
        (a.sin_component - s).abs() < 1e-12 && (a.cos_component - c).abs() < 1e-12
    }

    #[test]
    fn embedding_quarter_points() {
        assert!(close(time_embedding(0.0).unwrap(), 0.0, 1.0));
        assert!(close(time_embedding(360.0).unwrap(), 1.0, 0.0));
        assert!(close(time_embedding(720.0).unwrap(), 0.0, -1.0));
        assert!(time_embedding(1440.0).is_err());
        assert!(time_embedding(-1.0).is_err());
    }

    #[test]
    fn counts_by_substitution() {
        assert_eq!(window_count(24, 12).unwrap(), 23);
        assert_eq!(window_count(288, 1).unwrap(), 1);
        assert_eq!(window_count(24, 24).unwrap(), 12);
        assert!(window_count(289, 1).is_err());
        assert!(window_count(24, 0).is_err());
    }

    pub(crate) fn toy_day(valid: impl Fn(usize) -> bool) -> NormalizedDay {
        NormalizedDay {
            patient_id: "p".into(),
            date_index: 3,
            label: Label::Remission,
            split: Split::Train,
            sleep_onset_min: Some(1380.0),
            wake_min: Some(420.0),
            features: (0..SLOTS_PER_DAY).map(|i| [i as f64; INPUT_DIM]).collect(),
            target_valid: (0..SLOTS_PER_DAY).map(valid).collect(),
        }
    }

    #[test]
    fn window_contents_and_targets() {
        let day = toy_day(|i| i != 36);
        let w = make_windows(&day, 24, 12).unwrap();
        assert_eq!(w.len(), 23);
        assert_eq!(w[1].start, 12);
        assert_eq!(w[1].inputs.len(), 24 * INPUT_DIM);
        assert_eq!(w[1].inputs[0], 12.0);
        assert_eq!(w[1].inputs[23 * INPUT_DIM], 35.0);
        assert_eq!(w[0].cardiac_target, Some([24.0; CARDIAC_DIM]));
        assert!(w[1].cardiac_target.is_none());
        assert!(w[22].cardiac_target.is_none());
        assert!(w[21].cardiac_target.is_some());
        let t = time_embedding(23.0 * 5.0 + 2.5).unwrap();
        assert_eq!(w[0].time_target, t);
        let sleep = w[0].sleep_target.unwrap();
        assert_eq!(sleep[0], time_embedding(1380.0).unwrap());
        assert_eq!(sleep[1], time_embedding(420.0).unwrap());
    }

    #[test]
    fn missing_sleep_annotation_has_no_sleep_target() {
        let mut day = toy_day(|_| true);
        day.wake_min = None;
        assert!(make_windows(&day, 24, 24)
            .unwrap()
            .iter()
            .all(|w| w.sleep_target.is_none()));
    }

    proptest! {
        #[test]
        fn count_follows_formula(ws in 1usize..=288, stride in 1usize..300) {
            let day = toy_day(|_| true);
            let w = make_windows(&day, ws, stride).unwrap();
            prop_assert_eq!(w.len(), (288 - ws) / stride + 1);
            let with_target = w.iter().filter(|w| w.cardiac_target.is_some()).count();
            let reach = w.iter().filter(|w| w.start + ws < 288).count();
            prop_assert_eq!(with_target, reach);
        }

        #[test]
        fn embedding_on_unit_circle(m in 0.0f64..1440.0) {
            let e = time_embedding(m).unwrap();
            prop_assert!((e.sin_component.powi(2) + e.cos_component.powi(2) - 1.0).abs() < 1e-9);
        }
    }
}
