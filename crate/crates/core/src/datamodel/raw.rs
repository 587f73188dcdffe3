use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{rr_features, DataError, SlotFeatures, SLOTS_PER_DAY};

const MS_PER_DAY: i64 = 86_400_000;
const MS_PER_SLOT: i64 = MS_PER_DAY / SLOTS_PER_DAY as i64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawChannel {
    AccelX,
    AccelY,
    AccelZ,
    GyroX,
    GyroY,
    GyroZ,
    Hr,
    Rr,
    Steps,
}

/// One sensor reading. Timestamps count milliseconds from the start of the
/// patient's first day.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSample {
    pub timestamp_ms: i64,
    pub channel: RawChannel,
    pub value: f64,
}

#[derive(Deserialize)]
struct RawRow {
    patient_id: String,
    timestamp_ms: i64,
    channel: RawChannel,
    value: f64,
}

/// Reads `patient_id,timestamp_ms,channel,value` rows grouped by patient and
/// then by day index.
pub fn read_raw_samples<R: Read>(reader: R) -> Result<BTreeMap<String, BTreeMap<i64, Vec<RawSample>>>, DataError> {
    let mut out: BTreeMap<String, BTreeMap<i64, Vec<RawSample>>> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: RawRow = row?;
        let day = row.timestamp_ms.div_euclid(MS_PER_DAY);
        out.entry(row.patient_id)
            .or_default()
            .entry(day)
            .or_default()
            .push(RawSample {
                timestamp_ms: row.timestamp_ms,
                channel: row.channel,
                value: row.value,
            });
    }
    Ok(out)
}

#[derive(Default)]
struct Bin {
    count: usize,
    accel: Vec<f64>,
    gyro: Vec<f64>,
    hr: Vec<f64>,
    rr: Vec<f64>,
    steps: f64,
    pending_accel: Option<(i64, [f64; 3])>,
    pending_gyro: Option<(i64, [f64; 3])>,
}

fn push_axis(pending: &mut Option<(i64, [f64; 3])>, norms: &mut Vec<f64>, ts: i64, axis: usize, v: f64) {
    match pending {
        Some((t, xyz)) if *t == ts => xyz[axis] = v,
        _ => {
            flush(pending, norms);
            let mut xyz = [0.0; 3];
            xyz[axis] = v;
            *pending = Some((ts, xyz));
        }
    }
}

fn flush(pending: &mut Option<(i64, [f64; 3])>, norms: &mut Vec<f64>) {
    if let Some((_, xyz)) = pending.take() {
        norms.push(xyz.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Aggregates one day of samples into 288 five-minute bins. Axis readings
/// sharing a timestamp form one vector sample; empty bins are invalid.
pub fn aggregate_raw(samples: &[RawSample], day: i64) -> Result<Vec<SlotFeatures>, DataError> {
    let start = day * MS_PER_DAY;
    let mut bins: Vec<Bin> = (0..SLOTS_PER_DAY).map(|_| Bin::default()).collect();
    let mut last = i64::MIN;
    for s in samples {
        if s.timestamp_ms < last {
            return Err(DataError::RejectedInput(format!(
                "timestamp {} precedes {last}",
                s.timestamp_ms
            )));
        }
        last = s.timestamp_ms;
        let offset = s.timestamp_ms - start;
        if !(0..MS_PER_DAY).contains(&offset) {
            return Err(DataError::RejectedInput(format!(
                "timestamp {} outside day {day}",
                s.timestamp_ms
            )));
        }
        if !s.value.is_finite() {
            return Err(DataError::RejectedInput(format!(
                "non-finite value at {}",
                s.timestamp_ms
            )));
        }
        let bin = &mut bins[(offset / MS_PER_SLOT) as usize];
        bin.count += 1;
        match s.channel {
            RawChannel::AccelX => push_axis(&mut bin.pending_accel, &mut bin.accel, s.timestamp_ms, 0, s.value),
            RawChannel::AccelY => push_axis(&mut bin.pending_accel, &mut bin.accel, s.timestamp_ms, 1, s.value),
            RawChannel::AccelZ => push_axis(&mut bin.pending_accel, &mut bin.accel, s.timestamp_ms, 2, s.value),
            RawChannel::GyroX => push_axis(&mut bin.pending_gyro, &mut bin.gyro, s.timestamp_ms, 0, s.value),
            RawChannel::GyroY => push_axis(&mut bin.pending_gyro, &mut bin.gyro, s.timestamp_ms, 1, s.value),
            RawChannel::GyroZ => push_axis(&mut bin.pending_gyro, &mut bin.gyro, s.timestamp_ms, 2, s.value),
            RawChannel::Hr => bin.hr.push(s.value),
            RawChannel::Rr => bin.rr.push(s.value),
            RawChannel::Steps => bin.steps += s.value,
        }
    }
    Ok(bins
        .into_iter()
        .enumerate()
        .map(|(i, mut b)| {
            if b.count == 0 {
                return SlotFeatures::invalid(i);
            }
            flush(&mut b.pending_accel, &mut b.accel);
            flush(&mut b.pending_gyro, &mut b.gyro);
            let rr = rr_features(&b.rr);
            SlotFeatures {
                slot_index: i,
                accel_norm: mean(&b.accel),
                gyro_norm: mean(&b.gyro),
                hr_mean: mean(&b.hr),
                rr_mean: rr.rr_mean.unwrap_or(f64::NAN),
                rmssd: rr.rmssd.unwrap_or(f64::NAN),
                sdnn: rr.sdnn.unwrap_or(f64::NAN),
                hf_lomb_power: rr.hf_lomb_power.unwrap_or(f64::NAN),
                steps: b.steps,
                valid: true,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ts: i64, channel: RawChannel, value: f64) -> RawSample {
        RawSample {
            timestamp_ms: ts,
            channel,
            value,
        }
    }

    #[test]
    fn empty_stream_gives_invalid_bins() {
        let slots = aggregate_raw(&[], 0).unwrap();
        assert_eq!(slots.len(), SLOTS_PER_DAY);
        assert!(slots.iter().all(|s| !s.valid && s.hr_mean.is_nan()));
        assert!(slots.iter().enumerate().all(|(i, s)| s.slot_index == i));
    }

    #[test]
    fn constant_heart_rate() {
        let samples: Vec<_> = (0..SLOTS_PER_DAY as i64 * 5)
            .map(|m| sample(86_400_000 + m * 60_000, RawChannel::Hr, 60.0))
            .collect();
        let slots = aggregate_raw(&samples, 1).unwrap();
        assert!(slots.iter().all(|s| s.valid && s.hr_mean == 60.0));
    }

    #[test]
    fn accel_norm_is_mean_of_norms() {
        let samples = [
            sample(0, RawChannel::AccelX, 3.0),
            sample(0, RawChannel::AccelY, 0.0),
            sample(0, RawChannel::AccelZ, 0.0),
            sample(1000, RawChannel::AccelX, 0.0),
            sample(1000, RawChannel::AccelY, 4.0),
            sample(1000, RawChannel::AccelZ, 0.0),
        ];
        let slots = aggregate_raw(&samples, 0).unwrap();
        assert!((slots[0].accel_norm - 3.5).abs() < 1e-12);
        assert!(slots[0].gyro_norm.is_nan());
        assert!(!slots[1].valid);
    }

    #[test]
    fn steps_sum_and_rr_channels() {
        let samples = [
            sample(10, RawChannel::Steps, 3.0),
            sample(20, RawChannel::Rr, 790.0),
            sample(30, RawChannel::Rr, 810.0),
            sample(40, RawChannel::Steps, 4.0),
        ];
        let s = aggregate_raw(&samples, 0).unwrap()[0];
        assert_eq!(s.steps, 7.0);
        assert!((s.rmssd - 20.0).abs() < 1e-12 && (s.sdnn - 10.0).abs() < 1e-12);
        assert!(s.hf_lomb_power.is_nan());
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let samples = [sample(500, RawChannel::Hr, 60.0), sample(100, RawChannel::Hr, 61.0)];
        assert!(matches!(aggregate_raw(&samples, 0), Err(DataError::RejectedInput(_))));
        let outside = [sample(MS_PER_DAY, RawChannel::Hr, 60.0)];
        assert!(aggregate_raw(&outside, 0).is_err());
    }

    #[test]
    fn reads_csv_grouped_by_day() {
        let text = "patient_id,timestamp_ms,channel,value\np1,0,hr,60\np1,86400001,rr,800\np2,5,steps,2\n";
        let map = read_raw_samples(text.as_bytes()).unwrap();
        assert_eq!(map["p1"].len(), 2);
        assert_eq!(map["p1"][&1][0].channel, RawChannel::Rr);
        assert_eq!(map["p2"][&0][0].value, 2.0);
    }
}
