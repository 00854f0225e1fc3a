//! Rolling-origin backtests, error metrics, reports, counterfactual dose
//! analysis and absorption-constant comparisons.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord, WindowSample};
use crate::error::{Error, Result};
use crate::model::{dose_encoders, featurize_with, Checkpoint, FeatureMode, ForecastModel};
use crate::pk::PkParams;
use crate::stats::{paired_t_test_one_sided, TTest};

pub const CRITICAL_LOW: f64 = 70.0;
pub const CRITICAL_HIGH: f64 = 180.0;

fn check_metric_input(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Shape("metric of an empty series".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} forecasts", y.len(), y_hat.len())));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_metric_input(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_metric_input(y, y_hat)?;
    Ok((y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

/// True where glucose is at or below 70 mg/dL or at or above 180 mg/dL.
pub fn critical_mask(y: &[f64]) -> Vec<bool> {
    critical_mask_with(y, CRITICAL_LOW, CRITICAL_HIGH)
}

pub fn critical_mask_with(y: &[f64], low: f64, high: f64) -> Vec<bool> {
    y.iter().map(|&v| v <= low || v >= high).collect()
}

/// Forecasts issued at every origin of a record, one row per origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingForecast {
    pub origins: Vec<usize>,
    pub forecasts: Vec<Vec<f64>>,
}

/// Stride-1 rolling forecasts for origins `max(first_origin, L) ..= n - H`.
/// Row `t` reads only history indices below `t`.
pub fn rolling_forecast(
    model: &ForecastModel,
    pk: Option<&PkParams>,
    record: &PatientRecord,
    first_origin: usize,
) -> Result<RollingForecast> {
    let (l, h) = (model.input_len(), model.horizon());
    let n = record.len();
    if n < l + h {
        return Err(Error::InsufficientData(format!(
            "{}: {n} steps cannot hold a window of {}",
            record.patient_id,
            l + h
        )));
    }
    let start = first_origin.max(l);
    if start + h > n {
        return Err(Error::InsufficientData(format!(
            "{}: no origin at or after step {first_origin} leaves room for {h} targets",
            record.patient_id
        )));
    }
    let config = model.feature_config();
    let encoders = match config.mode {
        FeatureMode::Pharmacokinetic => {
            let pk = pk.ok_or_else(|| Error::Config("pharmacokinetic model needs absorption constants".into()))?;
            Some(dose_encoders(pk, &record.patient_id, record.grid.step_minutes as f64, l)?)
        }
        _ => None,
    };
    model.check_statics(&record.statics)?;
    let origins: Vec<usize> = (start..=n - h).collect();
    let forecasts = origins
        .iter()
        .map(|&t| {
            let w = WindowSample { patient_index: 0, history_start: t - l, input_len: l, horizon: h };
            model.forward(&featurize_with(record, &w, config, encoders.as_ref())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RollingForecast { origins, forecasts })
}

/// Observed (not forward-filled) target points with their forecasts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl PointSet {
    pub fn from_rolling(record: &PatientRecord, rolling: &RollingForecast) -> Self {
        let mut out = Self::default();
        for (&t, row) in rolling.origins.iter().zip(&rolling.forecasts) {
            for (i, &f) in row.iter().enumerate() {
                if record.observed_mask[t + i] {
                    out.y.push(record.glucose[t + i]);
                    out.y_hat.push(f);
                }
            }
        }
        out
    }

    pub fn extend(&mut self, other: &PointSet) {
        self.y.extend_from_slice(&other.y);
        self.y_hat.extend_from_slice(&other.y_hat);
    }

    pub fn critical(&self) -> PointSet {
        let mask = critical_mask(&self.y);
        let mut out = PointSet::default();
        for ((y, f), m) in self.y.iter().zip(&self.y_hat).zip(mask) {
            if m {
                out.y.push(*y);
                out.y_hat.push(*f);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `(mae, rmse)`, or `None` for an empty set.
    pub fn metrics(&self) -> Option<(f64, f64)> {
        if self.is_empty() {
            return None;
        }
        Some((mae(&self.y, &self.y_hat).ok()?, rmse(&self.y, &self.y_hat).ok()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Critical,
}

impl Metric {
    fn as_str(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Rmse => "rmse",
        }
    }
}

impl Subset {
    fn as_str(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Critical => "critical",
        }
    }
}

/// Label of the pooled cohort row.
pub const AGGREGATE: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub patient: String,
    pub metric: Metric,
    pub subset: Subset,
    pub trial_mean: f64,
    pub trial_sd: f64,
    pub trial_values: Vec<f64>,
    /// Scored horizon points per trial.
    pub points: usize,
}

/// Per-patient and pooled MAE/RMSE over all and critical values, summarized
/// across trials. Cells with no scored points are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub n_trials: usize,
    pub windows: usize,
    pub cells: Vec<ReportCell>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Scores of one trial: per patient point sets plus the window count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScores {
    pub patients: BTreeMap<String, PointSet>,
    pub windows: usize,
}

impl EvalReport {
    pub fn from_trials(mode: &str, trials: &[TrialScores]) -> Result<Self> {
        let first = trials.first().ok_or_else(|| Error::InsufficientData("no trials to report".into()))?;
        let ids: Vec<&String> = first.patients.keys().collect();
        for t in trials {
            if t.patients.keys().collect::<Vec<_>>() != ids {
                return Err(Error::Validation("trials cover different patients".into()));
            }
        }
        let mut rows: Vec<(String, Vec<PointSet>)> = ids
            .iter()
            .map(|id| ((*id).clone(), trials.iter().map(|t| t.patients[*id].clone()).collect()))
            .collect();
        let pooled = trials
            .iter()
            .map(|t| {
                let mut all = PointSet::default();
                for p in t.patients.values() {
                    all.extend(p);
                }
                all
            })
            .collect();
        rows.push((AGGREGATE.to_string(), pooled));

        let mut cells = Vec::new();
        for (patient, sets) in rows {
            for subset in [Subset::All, Subset::Critical] {
                let scored: Vec<PointSet> = sets
                    .iter()
                    .map(|s| if subset == Subset::All { s.clone() } else { s.critical() })
                    .collect();
                let metrics: Option<Vec<(f64, f64)>> = scored.iter().map(PointSet::metrics).collect();
                let Some(metrics) = metrics else { continue };
                for metric in [Metric::Mae, Metric::Rmse] {
                    let vals: Vec<f64> = metrics
                        .iter()
                        .map(|m| if metric == Metric::Mae { m.0 } else { m.1 })
                        .collect();
                    let (trial_mean, trial_sd) = mean_sd(&vals);
                    cells.push(ReportCell {
                        patient: patient.clone(),
                        metric,
                        subset,
                        trial_mean,
                        trial_sd,
                        trial_values: vals,
                        points: scored[0].len(),
                    });
                }
            }
        }
        Ok(Self { mode: mode.to_string(), n_trials: trials.len(), windows: first.windows, cells })
    }

    pub fn cell(&self, patient: &str, metric: Metric, subset: Subset) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.patient == patient && c.metric == metric && c.subset == subset)
    }

    pub fn patients(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if c.patient != AGGREGATE && !out.contains(&c.patient) {
                out.push(c.patient.clone());
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV: patient, mode, metric, subset, trial_mean, trial_sd.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient", "mode", "metric", "subset", "trial_mean", "trial_sd"])?;
        for c in &self.cells {
            w.write_record([
                c.patient.as_str(),
                self.mode.as_str(),
                c.metric.as_str(),
                c.subset.as_str(),
                &c.trial_mean.to_string(),
                &c.trial_sd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores a checkpoint on the trailing `test_steps` of each of its patients.
/// `data` holds full records; the preceding steps supply forecast history.
pub fn score_checkpoint(ck: &Checkpoint, data: &Dataset, test_steps: usize) -> Result<TrialScores> {
    let model = ck.model()?;
    let cohort = data.select(&ck.patient_ids)?;
    let mut out = TrialScores::default();
    for r in &cohort.records {
        if test_steps > r.len() {
            return Err(Error::InsufficientData(format!(
                "{}: {} steps, test partition needs {test_steps}",
                r.patient_id,
                r.len()
            )));
        }
        let rolling = rolling_forecast(&model, ck.pk.as_ref(), r, r.len() - test_steps)?;
        out.windows += rolling.origins.len();
        out.patients.insert(r.patient_id.clone(), PointSet::from_rolling(r, &rolling));
    }
    Ok(out)
}

/// Groups checkpoints by trial (merging per-patient local models) and reports.
pub fn evaluate_checkpoints(mode: &str, checkpoints: &[Checkpoint], data: &Dataset, test_steps: usize) -> Result<EvalReport> {
    let mut trials: BTreeMap<usize, TrialScores> = BTreeMap::new();
    for ck in checkpoints {
        let s = score_checkpoint(ck, data, test_steps)?;
        let t = trials.entry(ck.meta.trial).or_default();
        t.windows += s.windows;
        for (id, p) in s.patients {
            if t.patients.insert(id.clone(), p).is_some() {
                return Err(Error::Validation(format!("trial {} scores patient {id} twice", ck.meta.trial)));
            }
        }
    }
    EvalReport::from_trials(mode, &trials.into_values().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub patient: String,
    pub global_mae: f64,
    pub local_mae: f64,
    /// `local - global`; positive when the global model is better.
    pub improvement: f64,
    pub improvement_pct: f64,
}

/// Per-patient trial-mean MAE of global and local models plus the pooled row.
pub fn compare_global_local(global: &EvalReport, local: &EvalReport) -> Result<Vec<ComparisonRow>> {
    if global.patients() != local.patients() {
        return Err(Error::Validation("global and local reports cover different patients".into()));
    }
    if global.n_trials != local.n_trials {
        return Err(Error::Validation(format!(
            "{} global trials vs {} local trials",
            global.n_trials, local.n_trials
        )));
    }
    let mut ids = global.patients();
    ids.push(AGGREGATE.to_string());
    ids.into_iter()
        .map(|p| {
            let g = global.cell(&p, Metric::Mae, Subset::All);
            let l = local.cell(&p, Metric::Mae, Subset::All);
            let (Some(g), Some(l)) = (g, l) else {
                return Err(Error::Validation(format!("patient {p} has no MAE cell")));
            };
            let improvement = l.trial_mean - g.trial_mean;
            Ok(ComparisonRow {
                patient: p,
                global_mae: g.trial_mean,
                local_mae: l.trial_mean,
                improvement,
                improvement_pct: 100.0 * improvement / l.trial_mean,
            })
        })
        .collect()
}

/// Paired one-sided test that `candidate` has lower MAE than `baseline`,
/// pairing per-patient trial-mean MAE.
pub fn compare_mae_t_test(candidate: &EvalReport, baseline: &EvalReport) -> Result<TTest> {
    if candidate.patients() != baseline.patients() {
        return Err(Error::Validation("reports cover different patients".into()));
    }
    let mut base = Vec::new();
    let mut cand = Vec::new();
    for p in candidate.patients() {
        let (Some(c), Some(b)) = (candidate.cell(&p, Metric::Mae, Subset::All), baseline.cell(&p, Metric::Mae, Subset::All))
        else {
            return Err(Error::Validation(format!("patient {p} has no MAE cell")));
        };
        base.push(b.trial_mean);
        cand.push(c.trial_mean);
    }
    paired_t_test_one_sided(&base, &cand)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseTransform {
    Original,
    ZeroedBolus,
    ScaledBolus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    pub dose_transform: DoseTransform,
    pub scale_factor: f64,
}

impl CounterfactualSpec {
    pub fn new(dose_transform: DoseTransform, scale_factor: f64) -> Result<Self> {
        if !(scale_factor > 0.0 && scale_factor.is_finite()) {
            return Err(Error::Config(format!("scale factor must be positive, got {scale_factor}")));
        }
        Ok(Self { dose_transform, scale_factor })
    }

    /// The record with its bolus series transformed; everything else is untouched.
    pub fn apply(&self, record: &PatientRecord) -> PatientRecord {
        let mut r = record.clone();
        match self.dose_transform {
            DoseTransform::Original => {}
            DoseTransform::ZeroedBolus => r.doses.bolus.iter_mut().for_each(|d| *d = 0.0),
            DoseTransform::ScaledBolus => r.doses.bolus.iter_mut().for_each(|d| *d *= self.scale_factor),
        }
        r
    }
}

/// Final-horizon forecasts per origin after transforming the bolus series.
pub fn counterfactual_forecasts(
    model: &ForecastModel,
    pk: Option<&PkParams>,
    record: &PatientRecord,
    spec: &CounterfactualSpec,
    first_origin: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if model.feature_config().mode != FeatureMode::Pharmacokinetic {
        return Err(Error::Config(format!(
            "counterfactual analysis needs a pharmacokinetic model, got {:?}",
            model.feature_config().mode
        )));
    }
    let rolling = rolling_forecast(model, pk, &spec.apply(record), first_origin)?;
    let last = rolling.forecasts.iter().map(|row| row[row.len() - 1]).collect();
    Ok((rolling.origins, last))
}

/// Original, bolus-free and scaled-bolus final-horizon forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTable {
    pub patient_id: String,
    pub origin_timestamps: Vec<i64>,
    pub original: Vec<f64>,
    pub zeroed: Vec<f64>,
    pub scaled: Vec<f64>,
    pub scale_factor: f64,
}

impl CounterfactualTable {
    pub fn compute(
        model: &ForecastModel,
        pk: Option<&PkParams>,
        record: &PatientRecord,
        scale_factor: f64,
        first_origin: usize,
    ) -> Result<Self> {
        let run = |t| -> Result<(Vec<usize>, Vec<f64>)> {
            counterfactual_forecasts(model, pk, record, &CounterfactualSpec::new(t, scale_factor)?, first_origin)
        };
        let (origins, original) = run(DoseTransform::Original)?;
        let (_, zeroed) = run(DoseTransform::ZeroedBolus)?;
        let (_, scaled) = run(DoseTransform::ScaledBolus)?;
        Ok(Self {
            patient_id: record.patient_id.clone(),
            origin_timestamps: origins.iter().map(|&t| record.grid.timestamp(t)).collect(),
            original,
            zeroed,
            scaled,
            scale_factor,
        })
    }

    /// Column means `(original, zeroed, scaled)`.
    pub fn means(&self) -> (f64, f64, f64) {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (m(&self.original), m(&self.zeroed), m(&self.scaled))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["origin_timestamp", "original", "zeroed", "scaled"])?;
        for i in 0..self.original.len() {
            w.write_record([
                self.origin_timestamps[i].to_string(),
                self.original[i].to_string(),
                self.zeroed[i].to_string(),
                self.scaled[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub patient_id: String,
    pub trial: usize,
    pub k_bolus: f64,
    pub k_basal: f64,
}

/// Learned absorption constants per (patient, trial) with the paired test of
/// `k_bolus > k_basal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTable {
    pub rows: Vec<KRow>,
    pub mean_k_bolus: f64,
    pub mean_k_basal: f64,
    pub test: TTest,
}

impl KTable {
    pub fn from_checkpoints(checkpoints: &[Checkpoint]) -> Result<Self> {
        let mut rows = Vec::new();
        for ck in checkpoints {
            let pk = ck.pk.as_ref().ok_or_else(|| {
                Error::Config(format!("checkpoint of trial {} has no absorption constants", ck.meta.trial))
            })?;
            for (i, id) in pk.patient_ids().iter().enumerate() {
                rows.push(KRow { patient_id: id.clone(), trial: ck.meta.trial, k_bolus: pk.k_bolus(i), k_basal: pk.k_basal(i) });
            }
        }
        Self::from_rows(rows)
    }

    pub fn from_rows(mut rows: Vec<KRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.trial.cmp(&b.trial)));
        let a: Vec<f64> = rows.iter().map(|r| r.k_bolus).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.k_basal).collect();
        let test = paired_t_test_one_sided(&a, &b)?;
        let n = rows.len() as f64;
        Ok(Self { mean_k_bolus: a.iter().sum::<f64>() / n, mean_k_basal: b.iter().sum::<f64>() / n, rows, test })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["patient", "trial", "k_bolus", "k_basal"])?;
        for r in &self.rows {
            w.write_record([r.patient_id.clone(), r.trial.to_string(), r.k_bolus.to_string(), r.k_basal.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
