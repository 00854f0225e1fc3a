//! Pharmacokinetic dose encoder.
//!
//! A dose `d` given at time zero produces the plasma concentration
//!
//! ```text
//! C(t, d, k) = d / (k * sqrt(2*pi) * t) * exp(-(ln t - 1)^2 / (2 k^2))
//! ```
//!
//! i.e. a log-normal density with `mu = 1`, `sigma = k`, scaled by the dose so
//! that the area under the curve equals `d`. `t` is in minutes. `C(0, .) = 0`.
//!
//! A window of doses is encoded by superposition through the stacking matrix
//! `w[t][j] = max(j - t, 0)`: `c_j = sum_t C(w[t][j] * f, d_t, k)`, so a dose
//! contributes nothing at or before its own step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, WindowSample};
use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Location parameter of the log-normal curve, held fixed.
pub const MU: f64 = 1.0;

#[inline]
fn unit_curve(t: f64, k: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let z = t.ln() - MU;
    (-z * z / (2.0 * k * k)).exp() / (k * SQRT_2PI * t)
}

#[inline]
fn unit_curve_grad(t: f64, k: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let z = t.ln() - MU;
    unit_curve(t, k) * (z * z / (k * k * k) - 1.0 / k)
}

fn check_domain(t: f64, dose: f64, k: f64) -> Result<()> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Domain(format!("absorption constant must be positive, got {k}")));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be non-negative, got {t}")));
    }
    if !(dose.is_finite() && dose >= 0.0) {
        return Err(Error::Domain(format!("dose must be non-negative, got {dose}")));
    }
    Ok(())
}

/// Plasma concentration `t` minutes after a dose of `dose` units.
pub fn concentration_at(t: f64, dose: f64, k: f64) -> Result<f64> {
    check_domain(t, dose, k)?;
    Ok(dose * unit_curve(t, k))
}

/// Partial derivative of [`concentration_at`] with respect to `k`.
pub fn concentration_grad_k(t: f64, dose: f64, k: f64) -> Result<f64> {
    check_domain(t, dose, k)?;
    Ok(dose * unit_curve_grad(t, k))
}

/// Upper-triangular step-offset matrix used to superpose dose curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackingMatrix {
    len: usize,
}

impl StackingMatrix {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Domain("stacking matrix needs at least one step".into()));
        }
        Ok(Self { len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> usize {
        j.saturating_sub(t)
    }

    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        (0..self.len)
            .map(|t| (0..self.len).map(|j| self.get(t, j)).collect())
            .collect()
    }
}

/// Encoded concentration over a window plus `dk[j] = d values[j] / dk`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationFeature {
    pub values: Vec<f64>,
    pub dk: Vec<f64>,
}

/// Unit-dose curve sampled at every step offset of a window, reusable across
/// windows sharing `k`.
#[derive(Debug, Clone)]
pub struct DoseEncoder {
    k: f64,
    step_minutes: f64,
    kernel: Vec<f64>,
    kernel_dk: Vec<f64>,
}

impl DoseEncoder {
    pub fn new(k: f64, step_minutes: f64, len: usize) -> Result<Self> {
        check_domain(0.0, 0.0, k)?;
        if !(step_minutes.is_finite() && step_minutes > 0.0) {
            return Err(Error::Domain(format!(
                "step must be positive, got {step_minutes}"
            )));
        }
        let stack = StackingMatrix::new(len)?;
        // Row 0 of the stacking matrix holds every offset 0..len.
        let offsets = (0..stack.len()).map(|j| stack.get(0, j) as f64 * step_minutes);
        let (kernel, kernel_dk) = offsets
            .map(|t| (unit_curve(t, k), unit_curve_grad(t, k)))
            .unzip();
        Ok(Self {
            k,
            step_minutes,
            kernel,
            kernel_dk,
        })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn step_minutes(&self) -> f64 {
        self.step_minutes
    }

    pub fn len(&self) -> usize {
        self.kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernel.is_empty()
    }

    /// Unit-dose concentration at each step offset (`kernel[0] = 0`).
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn encode(&self, doses: &[f64]) -> Result<ConcentrationFeature> {
        let n = self.len();
        if doses.len() != n {
            return Err(Error::Shape(format!(
                "dose window has {} steps, encoder expects {n}",
                doses.len()
            )));
        }
        if let Some(d) = doses.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::Domain(format!("dose must be non-negative, got {d}")));
        }
        let stack = StackingMatrix { len: n };
        let mut values = vec![0.0; n];
        let mut dk = vec![0.0; n];
        for (t, &d) in doses.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for j in t + 1..n {
                let m = stack.get(t, j);
                values[j] += d * self.kernel[m];
                dk[j] += d * self.kernel_dk[m];
            }
        }
        Ok(ConcentrationFeature { values, dk })
    }
}

/// Concentration feature of a dose window; `step_minutes` is the grid frequency.
pub fn encode_doses(doses: &[f64], k: f64, step_minutes: f64) -> Result<ConcentrationFeature> {
    DoseEncoder::new(k, step_minutes, doses.len().max(1))?.encode(doses)
}

/// Per-patient absorption constants.
///
/// Stored as logarithms so that unconstrained optimizer updates keep every
/// constant strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PkTable", try_from = "PkTable")]
pub struct PkParams {
    patient_ids: Vec<String>,
    log_k_bolus: Vec<f64>,
    log_k_basal: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KPair {
    pub k_bolus: f64,
    pub k_basal: f64,
}

type PkTable = BTreeMap<String, KPair>;

impl From<PkParams> for PkTable {
    fn from(p: PkParams) -> Self {
        (0..p.len())
            .map(|i| (p.patient_ids[i].clone(), p.get(i)))
            .collect()
    }
}

impl TryFrom<PkTable> for PkParams {
    type Error = Error;

    fn try_from(table: PkTable) -> Result<Self> {
        let ids: Vec<String> = table.keys().cloned().collect();
        let bolus: Vec<f64> = table.values().map(|p| p.k_bolus).collect();
        let basal: Vec<f64> = table.values().map(|p| p.k_basal).collect();
        PkParams::new(ids, &bolus, &basal)
    }
}

impl PkParams {
    pub fn new(patient_ids: Vec<String>, k_bolus: &[f64], k_basal: &[f64]) -> Result<Self> {
        if k_bolus.len() != patient_ids.len() || k_basal.len() != patient_ids.len() {
            return Err(Error::Shape(format!(
                "{} patients but {} bolus / {} basal constants",
                patient_ids.len(),
                k_bolus.len(),
                k_basal.len()
            )));
        }
        if let Some(k) = k_bolus.iter().chain(k_basal).find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(Error::Domain(format!("absorption constant must be positive, got {k}")));
        }
        Ok(Self {
            patient_ids,
            log_k_bolus: k_bolus.iter().map(|k| k.ln()).collect(),
            log_k_basal: k_basal.iter().map(|k| k.ln()).collect(),
        })
    }

    /// Every patient starts from the same constants.
    pub fn uniform(patient_ids: Vec<String>, k_bolus: f64, k_basal: f64) -> Result<Self> {
        let n = patient_ids.len();
        Self::new(patient_ids, &vec![k_bolus; n], &vec![k_basal; n])
    }

    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn index_of(&self, patient_id: &str) -> Result<usize> {
        self.patient_ids
            .iter()
            .position(|p| p == patient_id)
            .ok_or_else(|| Error::UnknownPatient(patient_id.to_string()))
    }

    pub fn k_bolus(&self, i: usize) -> f64 {
        self.log_k_bolus[i].exp()
    }

    pub fn k_basal(&self, i: usize) -> f64 {
        self.log_k_basal[i].exp()
    }

    pub fn get(&self, i: usize) -> KPair {
        KPair {
            k_bolus: self.k_bolus(i),
            k_basal: self.k_basal(i),
        }
    }

    pub fn lookup(&self, patient_id: &str) -> Result<KPair> {
        Ok(self.get(self.index_of(patient_id)?))
    }

    /// Unconstrained parameters, laid out as `[log k_bolus..., log k_basal...]`.
    pub fn raw(&self) -> Vec<f64> {
        self.log_k_bolus
            .iter()
            .chain(&self.log_k_basal)
            .copied()
            .collect()
    }

    pub fn set_raw(&mut self, raw: &[f64]) -> Result<()> {
        let n = self.len();
        if raw.len() != 2 * n {
            return Err(Error::Shape(format!("expected {} raw values, got {}", 2 * n, raw.len())));
        }
        self.log_k_bolus.copy_from_slice(&raw[..n]);
        self.log_k_basal.copy_from_slice(&raw[n..]);
        Ok(())
    }

    /// Keeps only the listed patients, in the given order.
    pub fn subset(&self, patient_ids: &[String]) -> Result<Self> {
        let mut out = Self {
            patient_ids: Vec::new(),
            log_k_bolus: Vec::new(),
            log_k_basal: Vec::new(),
        };
        for id in patient_ids {
            let i = self.index_of(id)?;
            out.patient_ids.push(id.clone());
            out.log_k_bolus.push(self.log_k_bolus[i]);
            out.log_k_basal.push(self.log_k_basal[i]);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Bolus and basal concentration features for the history of `window`.
/// Glucose and CHO are untouched by the encoder.
pub fn encode_record(
    record: &PatientRecord,
    params: &PkParams,
    window: &WindowSample,
) -> Result<(ConcentrationFeature, ConcentrationFeature)> {
    let ks = params.lookup(&record.patient_id)?;
    let range = window.history();
    if range.end > record.len() {
        return Err(Error::Shape(format!(
            "window {range:?} exceeds record of {} steps",
            record.len()
        )));
    }
    let f = record.grid.step_minutes as f64;
    let bolus = encode_doses(&record.doses.bolus[range.clone()], ks.k_bolus, f)?;
    let basal = encode_doses(&record.doses.basal[range], ks.k_basal, f)?;
    Ok((bolus, basal))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference evaluation straight from the closed form, written out separately.
    fn lognormal_pdf(t: f64, mu: f64, sigma: f64) -> f64 {
        let z = (t.ln() - mu) / sigma;
        (-0.5 * z * z).exp() / (t * sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn value_matches_lognormal_density() {
        let c = concentration_at(5.0, 1.0, 1.5).unwrap();
        // statrs as an independent reference for the density.
        use statrs::distribution::{Continuous, LogNormal};
        let reference = LogNormal::new(1.0, 1.5).unwrap().pdf(5.0);
        assert!((c - reference).abs() <= 1e-15 * reference.abs().max(1.0), "{c} vs {reference}");
        assert!((c - lognormal_pdf(5.0, 1.0, 1.5)).abs() < 1e-16);
    }

    #[test]
    fn zero_time_and_zero_dose() {
        assert_eq!(concentration_at(0.0, 5.0, 1.5).unwrap(), 0.0);
        assert_eq!(concentration_at(7.0, 0.0, 1.2).unwrap(), 0.0);
        assert_eq!(concentration_grad_k(7.0, 0.0, 1.2).unwrap(), 0.0);
        assert_eq!(concentration_grad_k(0.0, 3.0, 1.2).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors() {
        assert!(concentration_at(1.0, 1.0, 0.0).is_err());
        assert!(concentration_at(1.0, 1.0, -1.0).is_err());
        assert!(concentration_at(-1.0, 1.0, 1.0).is_err());
        assert!(concentration_grad_k(1.0, 1.0, 0.0).is_err());
        assert!(StackingMatrix::new(0).is_err());
        assert!(encode_doses(&[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn gradient_vanishes_at_analytic_root() {
        let t: f64 = 30.0;
        let k = t.ln() - 1.0;
        let g = concentration_grad_k(t, 2.0, k).unwrap();
        assert!(g.abs() < 1e-15, "{g}");
    }

    #[test]
    fn gradient_matches_central_difference() {
        let (t, d, k) = (5.0, 1.0, 1.5);
        let h = 1e-6 * k;
        let fd = (concentration_at(t, d, k + h).unwrap() - concentration_at(t, d, k - h).unwrap())
            / (2.0 * h);
        let g = concentration_grad_k(t, d, k).unwrap();
        assert!(((g - fd) / g).abs() < 1e-5);
    }

    #[test]
    fn stacking_matrix_layout() {
        let w = StackingMatrix::new(4).unwrap();
        assert_eq!(
            w.to_rows(),
            vec![vec![0, 1, 2, 3], vec![0, 0, 1, 2], vec![0, 0, 0, 1], vec![0, 0, 0, 0]]
        );
        assert_eq!(StackingMatrix::new(1).unwrap().to_rows(), vec![vec![0]]);
        assert_eq!(StackingMatrix::new(8).unwrap().get(2, 5), 3);
    }

    #[test]
    fn single_dose_encoding() {
        let c = encode_doses(&[1.0, 0.0, 0.0, 0.0], 1.0, 5.0).unwrap();
        let expect = [
            0.0,
            concentration_at(5.0, 1.0, 1.0).unwrap(),
            concentration_at(10.0, 1.0, 1.0).unwrap(),
            concentration_at(15.0, 1.0, 1.0).unwrap(),
        ];
        assert_eq!(c.values, expect);
        assert!(encode_doses(&[0.0; 6], 1.3, 5.0).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_doses_superpose() {
        let mut both = vec![0.0; 6];
        both[0] = 2.0;
        both[2] = 3.0;
        let mut a = vec![0.0; 6];
        a[0] = 2.0;
        let mut b = vec![0.0; 6];
        b[2] = 3.0;
        let cb = encode_doses(&both, 1.4, 5.0).unwrap().values;
        let ca = encode_doses(&a, 1.4, 5.0).unwrap().values;
        let cbb = encode_doses(&b, 1.4, 5.0).unwrap().values;
        for j in 0..6 {
            assert!((cb[j] - ca[j] - cbb[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn pk_params_json_round_trip() {
        let p = PkParams::new(vec!["b".into(), "a".into()], &[1.5, 1.2], &[1.1, 1.9]).unwrap();
        let json = p.to_json().unwrap();
        let back = PkParams::from_json(&json).unwrap();
        assert!((back.lookup("b").unwrap().k_bolus - 1.5).abs() < 1e-14);
        assert!((back.lookup("a").unwrap().k_basal - 1.9).abs() < 1e-14);
        assert!(PkParams::new(vec!["a".into()], &[0.0], &[1.0]).is_err());
        assert!(matches!(p.index_of("zz"), Err(Error::UnknownPatient(_))));
    }

    #[test]
    fn raw_updates_stay_positive() {
        let mut p = PkParams::uniform(vec!["a".into()], 1.0, 1.0).unwrap();
        p.set_raw(&[-50.0, 40.0]).unwrap();
        assert!(p.k_bolus(0) > 0.0 && p.k_basal(0).is_finite());
    }
}
