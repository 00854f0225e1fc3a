//! Patient records on a regular time grid, windowing and partitioning.

mod ingest;

pub use ingest::{
    covering_grid, ingest_events, ingest_events_csv, read_aligned, read_aligned_csv, read_events,
    write_aligned, write_aligned_csv, EventKind, PreprocessConfig, RawEvent,
};

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling frequency of CGM devices, in minutes.
pub const DEFAULT_STEP_MINUTES: u32 = 5;
/// Ten hours of history at five-minute steps.
pub const DEFAULT_INPUT_LEN: usize = 120;
/// Thirty minutes ahead at five-minute steps.
pub const DEFAULT_HORIZON: usize = 6;
/// Trailing test partition length shared by every patient.
pub const DEFAULT_TEST_STEPS: usize = 2691;

/// A regular time axis. Timestamps are integer epoch minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: i64,
    pub step_minutes: u32,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(start: i64, step_minutes: u32, n_steps: usize) -> Result<Self> {
        if step_minutes == 0 {
            return Err(Error::Validation("step_minutes must be positive".into()));
        }
        if n_steps == 0 {
            return Err(Error::Validation("n_steps must be positive".into()));
        }
        Ok(Self {
            start,
            step_minutes,
            n_steps,
        })
    }

    pub fn timestamp(&self, index: usize) -> i64 {
        self.start + index as i64 * self.step_minutes as i64
    }

    /// Exclusive end of the covered span.
    pub fn end(&self) -> i64 {
        self.timestamp(self.n_steps)
    }

    /// Index of the grid step nearest to `ts`.
    pub fn snap(&self, ts: i64) -> Result<usize> {
        let step = self.step_minutes as i64;
        let idx = (ts - self.start + step / 2).div_euclid(step);
        if idx < 0 || idx >= self.n_steps as i64 {
            return Err(Error::Validation(format!(
                "timestamp {ts} outside grid [{}, {})",
                self.start,
                self.end()
            )));
        }
        Ok(idx as usize)
    }

    fn sub(&self, range: Range<usize>) -> Self {
        Self {
            start: self.timestamp(range.start),
            step_minutes: self.step_minutes,
            n_steps: range.len(),
        }
    }
}

/// Per-step insulin doses in units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DoseSeries {
    pub bolus: Vec<f64>,
    pub basal: Vec<f64>,
}

impl DoseSeries {
    pub fn zeros(n: usize) -> Self {
        Self {
            bolus: vec![0.0; n],
            basal: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.bolus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bolus.is_empty()
    }
}

pub const AGE_BUCKETS: [&str; 3] = ["20-40", "40-60", "60-80"];
pub const PUMP_TYPES: [&str; 2] = ["530G", "630G"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StaticFeatures {
    pub age_bucket: Option<String>,
    pub weight_kg: Option<f64>,
    pub one_hot_patient: Vec<f64>,
    pub pump_type: Option<String>,
}

impl StaticFeatures {
    /// Number of entries produced by [`encode`](Self::encode) for a cohort of `n_patients`.
    pub fn encoded_len(n_patients: usize) -> usize {
        n_patients + 2 + AGE_BUCKETS.len() + PUMP_TYPES.len()
    }

    /// Flat numeric encoding: patient one-hot, scaled weight with a missing
    /// flag, then one-hot age bucket and pump type (all zero when unknown).
    pub fn encode(&self) -> Vec<f64> {
        let mut out = self.one_hot_patient.clone();
        match self.weight_kg {
            Some(w) => out.extend([w / 100.0, 0.0]),
            None => out.extend([0.0, 1.0]),
        }
        for bucket in AGE_BUCKETS {
            out.push(f64::from(self.age_bucket.as_deref() == Some(bucket)));
        }
        for pump in PUMP_TYPES {
            out.push(f64::from(self.pump_type.as_deref() == Some(pump)));
        }
        out
    }
}

/// One patient's aligned series. `observed_mask[i]` is false where glucose was forward-filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub grid: TimeGrid,
    pub glucose: Vec<f64>,
    pub cho: Vec<f64>,
    pub doses: DoseSeries,
    pub observed_mask: Vec<bool>,
    pub statics: StaticFeatures,
}

impl PatientRecord {
    pub fn new(
        patient_id: impl Into<String>,
        grid: TimeGrid,
        glucose: Vec<f64>,
        cho: Vec<f64>,
        doses: DoseSeries,
        observed_mask: Vec<bool>,
        statics: StaticFeatures,
    ) -> Result<Self> {
        let record = Self {
            patient_id: patient_id.into(),
            grid,
            glucose,
            cho,
            doses,
            observed_mask,
            statics,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_steps;
        let lens = [
            ("glucose", self.glucose.len()),
            ("cho", self.cho.len()),
            ("bolus", self.doses.bolus.len()),
            ("basal", self.doses.basal.len()),
            ("observed_mask", self.observed_mask.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Validation(format!(
                    "{}: {name} has {len} entries, grid has {n}",
                    self.patient_id
                )));
            }
        }
        if let Some(i) = self.glucose.iter().position(|g| !g.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: non-finite glucose at step {i}",
                self.patient_id
            )));
        }
        for (name, series) in [
            ("cho", &self.cho),
            ("bolus", &self.doses.bolus),
            ("basal", &self.doses.basal),
        ] {
            if let Some(i) = series.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Validation(format!(
                    "{}: {name} must be finite and non-negative (step {i})",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n_steps == 0
    }

    /// Contiguous sub-record over `range` of step indices.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.len() {
            return Err(Error::Validation(format!(
                "slice {range:?} out of bounds for {} steps",
                self.len()
            )));
        }
        Ok(Self {
            patient_id: self.patient_id.clone(),
            grid: self.grid.sub(range.clone()),
            glucose: self.glucose[range.clone()].to_vec(),
            cho: self.cho[range.clone()].to_vec(),
            doses: DoseSeries {
                bolus: self.doses.bolus[range.clone()].to_vec(),
                basal: self.doses.basal[range.clone()].to_vec(),
            },
            observed_mask: self.observed_mask[range].to_vec(),
            statics: self.statics.clone(),
        })
    }

    /// Keeps only the trailing `steps` steps (or everything if shorter).
    pub fn tail(&self, steps: usize) -> Result<Self> {
        let n = self.len();
        self.slice(n.saturating_sub(steps)..n)
    }
}

/// A forecasting window: `input_len` steps of history followed by `horizon` target steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub patient_index: usize,
    pub history_start: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl WindowSample {
    /// First forecast step; the history never reaches this index.
    pub fn origin(&self) -> usize {
        self.history_start + self.input_len
    }

    pub fn history(&self) -> Range<usize> {
        self.history_start..self.origin()
    }

    pub fn target(&self) -> Range<usize> {
        self.origin()..self.origin() + self.horizon
    }
}

/// Fills gaps with the last observed value. The mask is false exactly at filled positions.
pub fn forward_fill(series: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut values = Vec::with_capacity(series.len());
    let mut mask = Vec::with_capacity(series.len());
    let mut last: Option<f64> = None;
    for (i, v) in series.iter().enumerate() {
        match (v, last) {
            (Some(x), _) => {
                values.push(*x);
                mask.push(true);
                last = Some(*x);
            }
            (None, Some(prev)) => {
                values.push(prev);
                mask.push(false);
            }
            (None, None) => {
                return Err(Error::Validation(format!(
                    "leading gap at index {i}: nothing to forward-fill from"
                )))
            }
        }
    }
    Ok((values, mask))
}

/// All windows of one record, ordered by `history_start`.
pub fn make_windows(
    record: &PatientRecord,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    window_starts(record.len(), input_len, horizon, stride).map(|starts| {
        starts
            .map(|history_start| WindowSample {
                patient_index: 0,
                history_start,
                input_len,
                horizon,
            })
            .collect()
    })
}

fn window_starts(
    n_steps: usize,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>> {
    if input_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Validation(
            "input length, horizon and stride must be positive".into(),
        ));
    }
    if input_len + horizon > n_steps {
        return Err(Error::InsufficientData(format!(
            "window of {} steps does not fit in {n_steps} steps",
            input_len + horizon
        )));
    }
    Ok((0..=n_steps - input_len - horizon).step_by(stride))
}

/// Chronological split; the test partition is the trailing `test_steps` steps.
pub fn split_train_test(
    record: &PatientRecord,
    test_steps: usize,
) -> Result<(PatientRecord, PatientRecord)> {
    let n = record.len();
    if test_steps >= n {
        return Err(Error::InsufficientData(format!(
            "{}: test partition of {test_steps} steps leaves no training data ({n} steps)",
            record.patient_id
        )));
    }
    Ok((record.slice(0..n - test_steps)?, record.slice(n - test_steps..n)?))
}

/// A multi-patient cohort. Construction assigns the one-hot patient encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn new(mut records: Vec<PatientRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("dataset has no patients".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.patient_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate patient id `{}`",
                    r.patient_id
                )));
            }
        }
        let n = records.len();
        for (i, r) in records.iter_mut().enumerate() {
            r.statics.one_hot_patient = (0..n).map(|j| f64::from(i == j)).collect();
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn index_of(&self, patient_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.patient_id == patient_id)
    }

    pub fn n_statics(&self) -> usize {
        StaticFeatures::encoded_len(self.len())
    }

    /// Applies `f` to every record, keeping the one-hot assignment.
    pub fn map_records<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&PatientRecord) -> Result<PatientRecord>,
    {
        let records = self.records.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    /// Cohort of the named patients in the given order, so that one-hot
    /// statics line up with a model trained on that cohort.
    pub fn select(&self, patient_ids: &[String]) -> Result<Self> {
        let records = patient_ids
            .iter()
            .map(|id| {
                self.index_of(id)
                    .map(|i| self.records[i].clone())
                    .ok_or_else(|| Error::UnknownPatient(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records)
    }

    /// Single-patient cohort, as used by local models.
    pub fn single(&self, index: usize) -> Result<Self> {
        Self::new(vec![self.records[index].clone()])
    }

    /// Per-patient (train, test) split.
    pub fn split(&self, test_steps: usize) -> Result<(Self, Self)> {
        let mut train = Vec::with_capacity(self.len());
        let mut test = Vec::with_capacity(self.len());
        for r in &self.records {
            let (a, b) = split_train_test(r, test_steps)?;
            train.push(a);
            test.push(b);
        }
        Ok((Self { records: train }, Self { records: test }))
    }

    /// Windows of every patient that has room for one; patients that are too
    /// short are skipped.
    pub fn windows(&self, input_len: usize, horizon: usize, stride: usize) -> Vec<WindowSample> {
        let mut out = Vec::new();
        for (p, r) in self.records.iter().enumerate() {
            if let Ok(starts) = window_starts(r.len(), input_len, horizon, stride) {
                out.extend(starts.map(|history_start| WindowSample {
                    patient_index: p,
                    history_start,
                    input_len,
                    horizon,
                }));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn flat_record(n: usize) -> PatientRecord {
        PatientRecord::new(
            "p",
            TimeGrid::new(0, 5, n).unwrap(),
            (0..n).map(|i| 100.0 + i as f64).collect(),
            vec![0.0; n],
            DoseSeries::zeros(n),
            vec![true; n],
            StaticFeatures::default(),
        )
        .unwrap()
    }

    #[test]
    fn forward_fill_gaps() {
        let (v, m) = forward_fill(&[Some(100.0), None, None, Some(90.0)]).unwrap();
        assert_eq!(v, vec![100.0, 100.0, 100.0, 90.0]);
        assert_eq!(m, vec![true, false, false, true]);
    }

    #[test]
    fn forward_fill_without_gaps_is_identity() {
        let (v, m) = forward_fill(&[Some(1.0), Some(2.0)]).unwrap();
        assert_eq!(v, vec![1.0, 2.0]);
        assert!(m.iter().all(|&b| b));
    }

    #[test]
    fn forward_fill_leading_gap_fails() {
        assert!(forward_fill(&[None, Some(100.0)]).is_err());
    }

    #[test]
    fn window_counts() {
        let r = flat_record(130);
        let w = make_windows(&r, 120, 6, 1).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[4].history_start, 4);
        assert_eq!(make_windows(&r, 120, 6, 130).unwrap().len(), 1);
        assert!(make_windows(&r, 150, 50, 1).is_err());
    }

    #[test]
    fn split_sizes() {
        let r = flat_record(10_000);
        let (train, test) = split_train_test(&r, 2691).unwrap();
        assert_eq!(train.len(), 7309);
        assert_eq!(test.len(), 2691);
        assert_eq!(test.grid.start, r.grid.timestamp(7309));
        assert_eq!(test.glucose[0], r.glucose[7309]);

        let (train, test) = split_train_test(&r, 0).unwrap();
        assert_eq!(train, r);
        assert!(test.is_empty());

        assert!(split_train_test(&r, 10_000).is_err());
    }

    #[test]
    fn snap_to_nearest_step() {
        let g = TimeGrid::new(1000, 5, 10).unwrap();
        assert_eq!(g.snap(1000).unwrap(), 0);
        assert_eq!(g.snap(1002).unwrap(), 0);
        assert_eq!(g.snap(1003).unwrap(), 1);
        assert_eq!(g.snap(1045).unwrap(), 9);
        assert!(g.snap(1050).is_err());
        assert!(g.snap(990).is_err());
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(TimeGrid::new(0, 0, 10).is_err());
        assert!(TimeGrid::new(0, 5, 0).is_err());
    }

    #[test]
    fn dataset_one_hot() {
        let mut a = flat_record(10);
        a.patient_id = "a".into();
        let mut b = flat_record(10);
        b.patient_id = "b".into();
        let ds = Dataset::new(vec![a.clone(), b]).unwrap();
        assert_eq!(ds.records[1].statics.one_hot_patient, vec![0.0, 1.0]);
        assert_eq!(ds.records[0].statics.encode().len(), ds.n_statics());
        assert!(Dataset::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn record_rejects_negative_dose() {
        let mut r = flat_record(4);
        r.doses.bolus[2] = -1.0;
        assert!(r.validate().is_err());
    }
}
