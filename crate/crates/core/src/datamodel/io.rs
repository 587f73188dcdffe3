use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DataError, DayRecord, Label, SlotFeatures, Split, SLOTS_PER_DAY};

#[derive(Serialize, Deserialize)]
struct SlotRow {
    patient_id: String,
    date_index: i64,
    slot_index: usize,
    accel_norm: f64,
    gyro_norm: f64,
    hr_mean: f64,
    rr_mean: f64,
    rmssd: f64,
    sdnn: f64,
    hf_lomb_power: f64,
    steps: f64,
    valid: u8,
}

#[derive(Serialize, Deserialize)]
struct DayRow {
    patient_id: String,
    date_index: i64,
    sleep_onset_min: Option<f64>,
    wake_min: Option<f64>,
    label: Label,
    split: Split,
}

/// Writes the per-slot table and the per-day sidecar.
pub fn write_days<W1: Write, W2: Write>(days: &[DayRecord], slots: W1, sidecar: W2) -> Result<(), DataError> {
    let mut sw = csv::Writer::from_writer(slots);
    let mut dw = csv::Writer::from_writer(sidecar);
    for d in days {
        for s in &d.slots {
            sw.serialize(SlotRow {
                patient_id: d.patient_id.clone(),
                date_index: d.date_index,
                slot_index: s.slot_index,
                accel_norm: s.accel_norm,
                gyro_norm: s.gyro_norm,
                hr_mean: s.hr_mean,
                rr_mean: s.rr_mean,
                rmssd: s.rmssd,
                sdnn: s.sdnn,
                hf_lomb_power: s.hf_lomb_power,
                steps: s.steps,
                valid: u8::from(s.valid),
            })?;
        }
        dw.serialize(DayRow {
            patient_id: d.patient_id.clone(),
            date_index: d.date_index,
            sleep_onset_min: d.sleep_onset_min,
            wake_min: d.wake_min,
            label: d.label,
            split: d.split,
        })?;
    }
    sw.flush()?;
    dw.flush()?;
    Ok(())
}

/// Reads days in sidecar order and validates each one.
pub fn read_days<R1: Read, R2: Read>(slots: R1, sidecar: R2) -> Result<Vec<DayRecord>, DataError> {
    let mut by_day: HashMap<(String, i64), Vec<SlotFeatures>> = HashMap::new();
    for row in csv::Reader::from_reader(slots).deserialize() {
        let r: SlotRow = row?;
        let valid = match r.valid {
            0 => false,
            1 => true,
            v => return Err(DataError::Format(format!("valid flag {v} is not 0/1"))),
        };
        let slot = if valid {
            SlotFeatures {
                slot_index: r.slot_index,
                accel_norm: r.accel_norm,
                gyro_norm: r.gyro_norm,
                hr_mean: r.hr_mean,
                rr_mean: r.rr_mean,
                rmssd: r.rmssd,
                sdnn: r.sdnn,
                hf_lomb_power: r.hf_lomb_power,
                steps: r.steps,
                valid,
            }
        } else {
            SlotFeatures::invalid(r.slot_index)
        };
        by_day
            .entry((r.patient_id, r.date_index))
            .or_insert_with(|| Vec::with_capacity(SLOTS_PER_DAY))
            .push(slot);
    }
    let mut days = Vec::new();
    for row in csv::Reader::from_reader(sidecar).deserialize() {
        let r: DayRow = row?;
        let key = (r.patient_id, r.date_index);
        let mut slots = by_day
            .remove(&key)
            .ok_or_else(|| DataError::Format(format!("{} day {} has no slot rows", key.0, key.1)))?;
        slots.sort_by_key(|s| s.slot_index);
        let day = DayRecord {
            patient_id: key.0,
            date_index: key.1,
            slots,
            sleep_onset_min: r.sleep_onset_min,
            wake_min: r.wake_min,
            label: r.label,
            split: r.split,
        };
        day.validate()?;
        days.push(day);
    }
    if let Some((p, d)) = by_day.keys().next() {
        return Err(DataError::Format(format!("{p} day {d} missing from the day table")));
    }
    Ok(days)
}

/// Builds day records from raw samples and the day sidecar. Days without
/// samples become fully invalid.
pub fn days_from_raw<R1: Read, R2: Read>(raw: R1, sidecar: R2) -> Result<Vec<DayRecord>, DataError> {
    let samples = super::raw::read_raw_samples(raw)?;
    let mut days = Vec::new();
    for row in csv::Reader::from_reader(sidecar).deserialize() {
        let r: DayRow = row?;
        let slots = match samples.get(&r.patient_id).and_then(|p| p.get(&r.date_index)) {
            Some(s) => super::raw::aggregate_raw(s, r.date_index)?,
            None => (0..SLOTS_PER_DAY).map(SlotFeatures::invalid).collect(),
        };
        let day = DayRecord {
            patient_id: r.patient_id,
            date_index: r.date_index,
            slots,
            sleep_onset_min: r.sleep_onset_min,
            wake_min: r.wake_min,
            label: r.label,
            split: r.split,
        };
        day.validate()?;
        days.push(day);
    }
    Ok(days)
}
