//! Synthetic multi-patient cohorts.
//!
//! Glucose follows a discrete first-order return to a baseline, pushed up by
//! absorbed carbohydrate and down by insulin:
//!
//! ```text
//! G[t+1] = G[t] + a (G_b - G[t]) + carb_impact * (carb kernel * CHO)[t]
//!          - insulin effect[t] + noise
//! ```
//!
//! In `minimal_model` mode the insulin effect is `insulin_sensitivity` times
//! plasma insulin from a fixed gamma-shaped kernel. In `encoder_oracle` mode it
//! is `insulin_sensitivity * f * c[t]`, where `c` is the dose encoder's own
//! concentration with the oracle absorption constants and `f` the step in
//! minutes (`c` is a per-minute rate). Oracle data are synthetic-only.
//!
//! Doses are emitted in units per step. Basal insulin is delivered once per
//! hour as `basal_rate` units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DoseSeries, PatientRecord, StaticFeatures, TimeGrid, DEFAULT_STEP_MINUTES};
use crate::error::{Error, Result};
use crate::pk::DoseEncoder;

/// 2024-01-01 00:00 UTC in epoch minutes.
pub const DEFAULT_START: i64 = 28_401_120;
pub const GLUCOSE_MIN: f64 = 20.0;
pub const GLUCOSE_MAX: f64 = 600.0;

/// Time constants (minutes) of the carbohydrate and plasma-insulin kernels.
const CARB_TAU: f64 = 40.0;
const INSULIN_TAU: f64 = 55.0;
const KERNEL_HOURS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    MinimalModel,
    EncoderOracle,
}

fn default_meals() -> usize {
    3
}
fn default_step() -> u32 {
    DEFAULT_STEP_MINUTES
}
fn default_mode() -> SynthMode {
    SynthMode::MinimalModel
}
fn default_k_bolus() -> f64 {
    1.3
}
fn default_k_basal() -> f64 {
    1.1
}
fn default_start() -> i64 {
    DEFAULT_START
}
fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub days: usize,
    #[serde(default = "default_meals")]
    pub meals_per_day: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: SynthMode,
    #[serde(default = "default_step")]
    pub step_minutes: u32,
    #[serde(default = "default_k_bolus")]
    pub oracle_k_bolus: f64,
    #[serde(default = "default_k_basal")]
    pub oracle_k_basal: f64,
    /// Multiplies every patient's noise level.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_start")]
    pub start: i64,
}

impl SynthConfig {
    pub fn new(n_patients: usize, days: usize, seed: u64, mode: SynthMode) -> Self {
        Self {
            n_patients,
            days,
            meals_per_day: default_meals(),
            seed,
            mode,
            step_minutes: default_step(),
            oracle_k_bolus: default_k_bolus(),
            oracle_k_basal: default_k_basal(),
            noise_scale: default_noise(),
            start: DEFAULT_START,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.days == 0 || self.meals_per_day == 0 {
            return Err(Error::Config("n_patients, days and meals_per_day must be at least 1".into()));
        }
        if self.step_minutes == 0 || 60 % self.step_minutes != 0 {
            return Err(Error::Config(format!("step_minutes {} must divide an hour", self.step_minutes)));
        }
        if !(self.oracle_k_bolus > 0.0 && self.oracle_k_basal > 0.0) {
            return Err(Error::Config("oracle absorption constants must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        24 * 60 / self.step_minutes as usize
    }

    pub fn n_steps(&self) -> usize {
        self.days * self.steps_per_day()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPatient {
    pub patient_id: String,
    /// Grams covered by one unit.
    pub carb_ratio: f64,
    /// mg/dL lowered by one correction unit, as assumed by the controller.
    pub correction_factor: f64,
    pub target_glucose: f64,
    /// Units per hour.
    pub basal_rate: f64,
    /// mg/dL drop per unit of absorbed insulin.
    pub insulin_sensitivity: f64,
    /// mg/dL rise per absorbed gram.
    pub carb_impact: f64,
    /// Per-step process noise.
    pub noise_sd: f64,
    /// Per-step return rate towards the baseline.
    pub reversion: f64,
    pub baseline_glucose: f64,
    pub oracle_k_bolus: f64,
    pub oracle_k_basal: f64,
}

/// Bolus calculator: carbohydrate coverage plus correction above target.
pub fn bolus_controller(glucose_now: f64, grams: f64, patient: &SynthPatient) -> f64 {
    let units = grams.max(0.0) / patient.carb_ratio
        + (glucose_now - patient.target_glucose).max(0.0) / patient.correction_factor;
    units.max(0.0)
}

/// Meals as `(step, grams)`: `meals_per_day` jittered meal times per day,
/// 30 to 90 g each.
pub fn schedule_meals<R: Rng>(config: &SynthConfig, _patient: &SynthPatient, rng: &mut R) -> Vec<(usize, f64)> {
    let f = config.step_minutes as f64;
    let m = config.meals_per_day;
    let (first, last) = (7.0 * 60.0, 20.0 * 60.0);
    let spacing = if m > 1 { (last - first) / (m - 1) as f64 } else { last - first };
    let jitter = (30.0f64).min(spacing / 3.0);
    let mut out = Vec::with_capacity(config.days * m);
    for day in 0..config.days {
        let day_start = day * config.steps_per_day();
        for i in 0..m {
            let anchor = if m > 1 { first + spacing * i as f64 } else { 12.5 * 60.0 };
            let minute = anchor + rng.random_range(-jitter..=jitter);
            let grams = rng.random_range(30..=90) as f64;
            out.push((day_start + (minute / f).round() as usize, grams));
        }
    }
    out
}

/// Per-step contributions, kept for checking the generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Components {
    pub insulin_effect: Vec<f64>,
    pub carb_effect: Vec<f64>,
    pub noise: Vec<f64>,
    /// Steps where the clamp was active.
    pub clamped: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub patients: Vec<SynthPatient>,
    pub components: Vec<Components>,
}

/// Manifest written next to generated CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub patients: Vec<SynthPatient>,
}

impl SynthCohort {
    pub fn manifest(&self) -> SynthManifest {
        SynthManifest { config: self.config.clone(), patients: self.patients.clone() }
    }
}

fn gamma_kernel(tau: f64, f: f64, len: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..len)
        .map(|m| {
            let t = m as f64 * f;
            t * (-t / tau).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Per-patient generator on its own stream of the master seed.
fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Unit-dose insulin kernel and the factor turning it into a per-step amount.
fn insulin_kernel(config: &SynthConfig, k: f64, len: usize) -> Result<(Vec<f64>, f64)> {
    let f = config.step_minutes as f64;
    Ok(match config.mode {
        SynthMode::MinimalModel => (gamma_kernel(INSULIN_TAU, f, len), 1.0),
        SynthMode::EncoderOracle => (DoseEncoder::new(k, f, len)?.kernel().to_vec(), f),
    })
}

fn kernel_mass((kernel, scale): (Vec<f64>, f64)) -> f64 {
    kernel.iter().sum::<f64>() * scale
}

fn draw_patient<R: Rng>(config: &SynthConfig, index: usize, rng: &mut R) -> Result<SynthPatient> {
    let carb_ratio = rng.random_range(8.0..15.0);
    let correction_factor = rng.random_range(30.0..60.0);
    let basal_rate = rng.random_range(0.6..1.2);
    let insulin_sensitivity = correction_factor * rng.random_range(0.8..1.2);
    let reversion = rng.random_range(0.008..0.015);
    let noise_sd = rng.random_range(1.0..2.0) * config.noise_scale;
    let target_glucose = 120.0;
    // Net drop per unit as delivered by the insulin kernel.
    let horizon = KERNEL_HOURS * 60 / config.step_minutes as usize;
    let mass = kernel_mass(insulin_kernel(config, config.oracle_k_basal, horizon)?);
    let bolus_mass = kernel_mass(insulin_kernel(config, config.oracle_k_bolus, horizon)?);
    let carb_impact = insulin_sensitivity * bolus_mass / carb_ratio * rng.random_range(0.85..1.15);
    let steps_per_hour = 60.0 / config.step_minutes as f64;
    let baseline_glucose = target_glucose + insulin_sensitivity * mass * basal_rate / (steps_per_hour * reversion);
    Ok(SynthPatient {
        patient_id: format!("synth{index:03}"),
        carb_ratio,
        correction_factor,
        target_glucose,
        basal_rate,
        insulin_sensitivity,
        carb_impact,
        noise_sd,
        reversion,
        baseline_glucose,
        oracle_k_bolus: config.oracle_k_bolus,
        oracle_k_basal: config.oracle_k_basal,
    })
}

/// Simulates one patient. Meal boluses are computed from the glucose at the
/// bolus step, with carb-counting error and timing jitter.
pub fn simulate_patient<R: Rng>(
    config: &SynthConfig,
    patient: &SynthPatient,
    rng: &mut R,
) -> Result<(PatientRecord, Components)> {
    let n = config.n_steps();
    let f = config.step_minutes as f64;
    let meals = schedule_meals(config, patient, rng);
    let mut cho = vec![0.0; n];
    let mut planned_bolus: Vec<Option<f64>> = vec![None; n];
    for &(step, grams) in &meals {
        if step >= n {
            continue;
        }
        cho[step] += grams;
        let counted = grams * rng.random_range(0.8..1.2);
        let shifted = step as i64 + rng.random_range(-2i64..=3);
        let b = shifted.clamp(0, n as i64 - 1) as usize;
        *planned_bolus[b].get_or_insert(0.0) += counted;
    }

    let kernel_len = match config.mode {
        SynthMode::MinimalModel => (KERNEL_HOURS * 60 / config.step_minutes as usize).min(n),
        SynthMode::EncoderOracle => n,
    };
    let (ins_bolus, scale) = insulin_kernel(config, patient.oracle_k_bolus, kernel_len)?;
    let (ins_basal, _) = insulin_kernel(config, patient.oracle_k_basal, kernel_len)?;
    let carb_k = gamma_kernel(CARB_TAU, f, (6 * 60 / config.step_minutes as usize).min(n));

    // Pending effects indexed by step, filled as doses are delivered.
    let mut c_bolus = vec![0.0; n];
    let mut c_basal = vec![0.0; n];
    let mut carb_effect = vec![0.0; n];
    for (t, &g) in cho.iter().enumerate() {
        if g > 0.0 {
            for (m, kv) in carb_k.iter().enumerate().skip(1) {
                if t + m < n {
                    carb_effect[t + m] += patient.carb_impact * g * kv;
                }
            }
        }
    }

    let noise_dist = Normal::new(0.0, patient.noise_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let steps_per_hour = 60 / config.step_minutes as usize;
    let mut doses = DoseSeries::zeros(n);
    let mut glucose = vec![0.0; n];
    let mut comp = Components {
        insulin_effect: vec![0.0; n],
        carb_effect: carb_effect.clone(),
        noise: vec![0.0; n],
        clamped: vec![false; n],
    };
    let mut g = patient.target_glucose;
    for t in 0..n {
        glucose[t] = g;
        if t % steps_per_hour == 0 {
            doses.basal[t] = patient.basal_rate;
        }
        if let Some(grams) = planned_bolus[t] {
            doses.bolus[t] = bolus_controller(g, grams, patient);
        }
        for (dose, kernel, c) in [
            (doses.bolus[t], &ins_bolus, &mut c_bolus),
            (doses.basal[t], &ins_basal, &mut c_basal),
        ] {
            if dose > 0.0 {
                for m in 1..kernel.len().min(n - t) {
                    c[t + m] += dose * kernel[m];
                }
            }
        }
        if t + 1 == n {
            break;
        }
        let insulin = patient.insulin_sensitivity * (scale * c_bolus[t] + scale * c_basal[t]);
        let noise = if patient.noise_sd > 0.0 { noise_dist.sample(rng) } else { 0.0 };
        comp.insulin_effect[t] = insulin;
        comp.noise[t] = noise;
        let next = g + patient.reversion * (patient.baseline_glucose - g) + carb_effect[t] - insulin + noise;
        g = next.clamp(GLUCOSE_MIN, GLUCOSE_MAX);
        comp.clamped[t] = g != next;
    }

    let grid = TimeGrid::new(config.start, config.step_minutes, n)?;
    let record = PatientRecord::new(&patient.patient_id, grid, glucose, cho, doses, vec![true; n], StaticFeatures::default())?;
    Ok((record, comp))
}

/// Generates the cohort; each patient uses its own stream of `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.n_patients);
    let mut patients = Vec::with_capacity(config.n_patients);
    let mut components = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let mut rng = patient_rng(config.seed, i);
        let p = draw_patient(config, i, &mut rng)?;
        let (r, c) = simulate_patient(config, &p, &mut rng)?;
        records.push(r);
        patients.push(p);
        components.push(c);
    }
    Ok(SynthCohort { config: config.clone(), dataset: Dataset::new(records)?, patients, components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pk::encode_doses;

    fn patient() -> SynthPatient {
        let cfg = SynthConfig::new(1, 1, 0, SynthMode::MinimalModel);
        draw_patient(&cfg, 0, &mut patient_rng(0, 0)).unwrap()
    }

    #[test]
    fn controller_examples() {
        let mut p = patient();
        p.carb_ratio = 10.0;
        p.target_glucose = 120.0;
        p.correction_factor = 50.0;
        assert_eq!(bolus_controller(120.0, 60.0, &p), 6.0);
        assert_eq!(bolus_controller(90.0, 0.0, &p), 0.0);
        assert_eq!(bolus_controller(220.0, 0.0, &p), 2.0);
    }

    #[test]
    fn meal_schedule() {
        let cfg = SynthConfig::new(1, 2, 7, SynthMode::MinimalModel);
        let p = patient();
        let a = schedule_meals(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(3));
        let b = schedule_meals(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        for day in a.chunks(3) {
            assert!(day.windows(2).all(|w| w[0].0 < w[1].0));
        }
        assert!(a.iter().all(|&(_, g)| (30.0..=90.0).contains(&g)));
    }

    #[test]
    fn no_effects_leaves_baseline_plus_noise() {
        let cfg = SynthConfig::new(1, 1, 0, SynthMode::MinimalModel);
        let mut p = patient();
        p.insulin_sensitivity = 0.0;
        p.carb_impact = 0.0;
        p.baseline_glucose = p.target_glucose;
        p.noise_sd = 0.0;
        let (r, _) = simulate_patient(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r.glucose.iter().all(|&g| g == p.target_glucose));
        p.noise_sd = 2.0;
        let (r, c) = simulate_patient(&cfg, &p, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 0..r.len() - 1 {
            let expect = r.glucose[t] + p.reversion * (p.baseline_glucose - r.glucose[t]) + c.noise[t];
            assert_eq!(r.glucose[t + 1], expect.clamp(GLUCOSE_MIN, GLUCOSE_MAX));
        }
    }

    #[test]
    fn oracle_insulin_term_is_encoder_output() {
        let cfg = SynthConfig::new(1, 2, 11, SynthMode::EncoderOracle);
        let cohort = generate(&cfg).unwrap();
        let (r, p, c) = (&cohort.dataset.records[0], &cohort.patients[0], &cohort.components[0]);
        let f = cfg.step_minutes as f64;
        let cb = encode_doses(&r.doses.bolus, 1.3, f).unwrap().values;
        let ca = encode_doses(&r.doses.basal, cfg.oracle_k_basal, f).unwrap().values;
        for t in 0..r.len() - 1 {
            assert_eq!(c.insulin_effect[t], p.insulin_sensitivity * (f * cb[t] + f * ca[t]), "step {t}");
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = SynthConfig::new(3, 2, 5, SynthMode::MinimalModel);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.patients[0].carb_ratio, a.patients[1].carb_ratio);
        for r in &a.dataset.records {
            assert_eq!(r.len(), 576);
            assert!(r.glucose.iter().all(|g| (GLUCOSE_MIN..=GLUCOSE_MAX).contains(g)));
            assert!(r.doses.bolus.iter().chain(&r.doses.basal).all(|d| *d >= 0.0 && d.is_finite()));
            assert_eq!(r.doses.basal.iter().filter(|d| **d > 0.0).count(), 48);
        }
    }
}
