//! Huber loss, Adam, global and local training, validation selection and
//! multi-seed trials.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, WindowSample};
use crate::error::{Error, Result};
use crate::model::{
    Checkpoint, CheckpointMeta, CohortFeaturizer, FeatureConfig, FeatureMode, FeatureTensor,
    ForecastModel, ModelSpec, Normalizer, Tape, TrainingMode,
};
use crate::pk::PkParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Windows used to fit input normalization.
const NORMALIZER_WINDOWS: usize = 2048;

fn check_pair(y: &[f64], y_hat: &[f64], delta: f64) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} forecasts", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Shape("empty loss input".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("huber delta must be positive, got {delta}")));
    }
    Ok(())
}

#[inline]
fn huber_term(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
fn huber_slope(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Mean Huber loss over elements.
pub fn huber_loss(y: &[f64], y_hat: &[f64], delta: f64) -> Result<f64> {
    check_pair(y, y_hat, delta)?;
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| huber_term(b - a, delta)).sum();
    Ok(s / y.len() as f64)
}

/// Gradient of [`huber_loss`] with respect to `y_hat`.
pub fn huber_grad(y: &[f64], y_hat: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_pair(y, y_hat, delta)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(y_hat).map(|(a, b)| huber_slope(b - a, delta) / n).collect())
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if theta.len() != grads.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, state of {}",
            theta.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient {} at index {i} (step {})",
            grads[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn default_lr() -> f64 {
    1e-3
}
fn default_k_lr() -> f64 {
    1e-2
}
fn default_batch() -> usize {
    4
}
fn default_steps() -> usize {
    1000
}
fn default_delta() -> f64 {
    1.0
}
fn default_k_range() -> (f64, f64) {
    (1.0, 2.0)
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_one() -> usize {
    1
}
fn default_mode() -> TrainingMode {
    TrainingMode::Global
}

/// Optimization settings. Read from JSON; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Step size for the log absorption constants.
    #[serde(default = "default_k_lr")]
    pub k_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_steps")]
    pub training_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub huber_delta: f64,
    /// Initial k is drawn per trial from an 11-point grid over this range.
    #[serde(default = "default_k_range")]
    pub k_init_range: (f64, f64),
    /// Fixed initial k for both dose types, overriding the grid draw.
    #[serde(default)]
    pub k_init: Option<f64>,
    #[serde(default = "default_mode")]
    pub mode: TrainingMode,
    /// Global gradient-norm clip; `null` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_one")]
    pub val_stride: usize,
    #[serde(default)]
    pub model: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.k_learning_rate >= 0.0 && self.k_learning_rate.is_finite()) {
            return bad(format!("k_learning_rate must be non-negative, got {}", self.k_learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.val_stride == 0 {
            return bad("batch_size, eval_every and val_stride must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 0.5], got {}", self.dropout));
        }
        if !(self.huber_delta > 0.0) {
            return bad(format!("huber_delta must be positive, got {}", self.huber_delta));
        }
        let (lo, hi) = self.k_init_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("k_init_range ({lo}, {hi}) is not a positive interval"));
        }
        if let Some(k) = self.k_init {
            if !(k > 0.0 && k.is_finite()) {
                return bad(format!("k_init must be positive, got {k}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// The 11-point grid of initial k values.
    pub fn k_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.k_init_range;
        (0..=10).map(|i| lo + (hi - lo) * i as f64 / 10.0).collect()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

pub fn write_log<W: Write>(log: &[LogEntry], mut out: W) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ForecastModel,
    pub pk: Option<PkParams>,
    /// Patients of the training cohort in one-hot order.
    pub patient_ids: Vec<String>,
    pub best_step: usize,
    pub val_loss: f64,
    pub initial_k: Option<f64>,
    pub log: Vec<LogEntry>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, mode: TrainingMode, trial: usize, seed: u64) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            self.pk.clone(),
            self.patient_ids.clone(),
            CheckpointMeta {
                mode,
                trial,
                seed,
                best_step: self.best_step,
                val_loss: self.val_loss,
            },
        )
    }
}

/// Training and validation windows carved chronologically from each patient's
/// training partition: validation windows forecast into the final
/// `val_fraction` of the record, training windows end before it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSplit {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
}

pub fn split_windows(dataset: &Dataset, input_len: usize, horizon: usize, val_fraction: f64, val_stride: usize) -> WindowSplit {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for w in dataset.windows(input_len, horizon, 1) {
        let n = dataset.records[w.patient_index].len();
        let boundary = n - (val_fraction * n as f64).ceil() as usize;
        if w.target().end <= boundary {
            train.push(w);
        } else if w.origin() >= boundary && (w.origin() - boundary) % val_stride == 0 {
            val.push(w);
        }
    }
    WindowSplit { train, val }
}

/// Per-point validation terms `(patient_index, step, huber)` over observed
/// target points, in normalized target units.
pub fn validation_terms(
    model: &ForecastModel,
    pk: Option<&PkParams>,
    dataset: &Dataset,
    windows: &[WindowSample],
    delta: f64,
) -> Result<Vec<(usize, usize, f64)>> {
    let feats = CohortFeaturizer::new(dataset, *model.feature_config(), pk, model.input_len())?;
    let s = model.normalizer().target_scale;
    let mut out = Vec::new();
    for w in windows {
        let r = &dataset.records[w.patient_index];
        let y_hat = model.forward(&feats.featurize(dataset, w)?)?;
        for (h, step) in w.target().enumerate() {
            if r.observed_mask[step] {
                out.push((w.patient_index, step, huber_term((y_hat[h] - r.glucose[step]) / s, delta)));
            }
        }
    }
    Ok(out)
}

/// Mean Huber loss over observed validation target points; NaN when none exist.
pub fn validation_loss(
    model: &ForecastModel,
    pk: Option<&PkParams>,
    dataset: &Dataset,
    windows: &[WindowSample],
    delta: f64,
) -> Result<f64> {
    let terms = validation_terms(model, pk, dataset, windows, delta)?;
    Ok(terms.iter().map(|t| t.2).sum::<f64>() / terms.len() as f64)
}

fn fit_normalizer(
    dataset: &Dataset,
    windows: &[WindowSample],
    feats: &CohortFeaturizer,
    spec: &ModelSpec,
) -> Result<Normalizer> {
    let stride = windows.len().div_ceil(NORMALIZER_WINDOWS).max(1);
    let samples = windows
        .iter()
        .step_by(stride)
        .map(|w| {
            let r = &dataset.records[w.patient_index];
            Ok((feats.featurize(dataset, w)?, r.glucose[w.target()].to_vec()))
        })
        .collect::<Result<Vec<(FeatureTensor, Vec<f64>)>>>()?;
    Normalizer::fit(&samples, spec.target_scaling)
}

/// Trains one parameter set shared across every patient of `dataset`, with
/// per-patient absorption constants in pharmacokinetic mode.
pub fn train_global(dataset: &Dataset, config: &TrainConfig, features: &FeatureConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &config.model;
    let (l, h) = (spec.input_len, spec.horizon);
    let split = split_windows(dataset, l, h, config.val_fraction, config.val_stride);
    if split.train.is_empty() {
        let short: Vec<_> = dataset.records.iter().map(|r| format!("{} ({} steps)", r.patient_id, r.len())).collect();
        return Err(Error::InsufficientData(format!(
            "no training windows of {} steps in {}",
            l + h,
            short.join(", ")
        )));
    }
    if split.val.is_empty() {
        return Err(Error::InsufficientData("training partition leaves no validation windows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids = dataset.patient_ids();
    let (mut pk, initial_k) = if features.mode == FeatureMode::Pharmacokinetic {
        let k0 = match config.k_init {
            Some(k) => k,
            None => {
                let grid = config.k_grid();
                grid[rng.random_range(0..grid.len())]
            }
        };
        (Some(PkParams::uniform(ids.clone(), k0, k0)?), Some(k0))
    } else {
        (None, None)
    };

    let n_statics = if features.include_statics { dataset.n_statics() } else { 0 };
    let feats = CohortFeaturizer::new(dataset, *features, pk.as_ref(), l)?;
    let normalizer = fit_normalizer(dataset, &split.train, &feats, spec)?;
    let mut model = ForecastModel::new(spec.clone(), *features, n_statics, normalizer, config.seed)?;

    let mut log = Vec::new();
    if !model.is_trainable() {
        let val = validation_loss(&model, pk.as_ref(), dataset, &split.val, config.huber_delta)?;
        log.push(LogEntry { step: 0, train_loss: f64::NAN, val_loss: Some(val) });
        return Ok(TrainOutcome { model, pk, patient_ids: ids, best_step: 0, val_loss: val, initial_k, log });
    }

    let n_theta = model.params().len();
    let mut theta = model.params().to_vec();
    let mut theta_state = AdamState::new(n_theta);
    let mut raw_k = pk.as_ref().map(PkParams::raw).unwrap_or_default();
    let mut k_state = AdamState::new(raw_k.len());
    let n_pat = dataset.len();
    let target_scale = model.normalizer().target_scale;
    let dropout = config.dropout;

    let mut best: Option<(f64, usize, Vec<f64>, Option<PkParams>)> = None;
    let mut g_theta = vec![0.0; n_theta];
    let mut g_k = vec![0.0; raw_k.len()];

    for step in 1..=config.training_steps {
        let feats = CohortFeaturizer::new(dataset, *features, pk.as_ref(), l)?;
        g_theta.iter_mut().for_each(|g| *g = 0.0);
        g_k.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        let bsz = config.batch_size as f64;
        for _ in 0..config.batch_size {
            let w = split.train[rng.random_range(0..split.train.len())];
            let r = &dataset.records[w.patient_index];
            let x = feats.featurize(dataset, &w)?;
            let mut tape = Tape::new();
            let y_hat = if dropout > 0.0 {
                model.forward_train(&x, Some((dropout, &mut rng)), &mut tape)?
            } else {
                model.forward_train::<ChaCha8Rng>(&x, None, &mut tape)?
            };
            let y: Vec<f64> = r.glucose[w.target()].iter().map(|v| v / target_scale).collect();
            let yh: Vec<f64> = y_hat.iter().map(|v| v / target_scale).collect();
            batch_loss += huber_loss(&y, &yh, config.huber_delta)? / bsz;
            let g_out: Vec<f64> = huber_grad(&y, &yh, config.huber_delta)?
                .into_iter()
                .map(|g| g / (target_scale * bsz))
                .collect();
            let grads = model.backward(&tape, &g_out)?;
            for (a, b) in g_theta.iter_mut().zip(&grads.theta) {
                *a += b;
            }
            if let (Some(pk), Some((gb, ga))) = (pk.as_ref(), grads.k_grads(&x)) {
                let p = w.patient_index;
                // Chain through k = exp(raw).
                g_k[p] += gb * pk.k_bolus(p);
                g_k[n_pat + p] += ga * pk.k_basal(p);
            }
        }
        if let Some(c) = config.grad_clip {
            let norm = g_theta.iter().chain(&g_k).map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                g_theta.iter_mut().chain(g_k.iter_mut()).for_each(|g| *g *= s);
            }
        }
        adam_step(&mut theta, &g_theta, &mut theta_state, config.learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        model.set_params(&theta)?;
        if let Some(pk) = pk.as_mut() {
            adam_step(&mut raw_k, &g_k, &mut k_state, config.k_learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
                .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
            pk.set_raw(&raw_k)?;
        }

        let mut entry = LogEntry { step, train_loss: batch_loss, val_loss: None };
        if step % config.eval_every == 0 || step == config.training_steps {
            let val = validation_loss(&model, pk.as_ref(), dataset, &split.val, config.huber_delta)?;
            entry.val_loss = Some(val);
            if val.is_finite() && best.as_ref().is_none_or(|b| val < b.0) {
                best = Some((val, step, theta.clone(), pk.clone()));
            }
        }
        log.push(entry);
    }

    let (val_loss, best_step, best_theta, best_pk) =
        best.ok_or_else(|| Error::Training("validation loss was never finite".into()))?;
    model.set_params(&best_theta)?;
    Ok(TrainOutcome {
        model,
        pk: best_pk,
        patient_ids: ids,
        best_step,
        val_loss,
        initial_k,
        log,
    })
}

/// One independent model per patient, each trained only on its own windows.
pub fn train_local(
    dataset: &Dataset,
    config: &TrainConfig,
    features: &FeatureConfig,
) -> Result<Vec<(String, TrainOutcome)>> {
    (0..dataset.len())
        .map(|i| {
            let single = dataset.single(i)?;
            let id = dataset.records[i].patient_id.clone();
            train_global(&single, config, features)
                .map(|o| (id.clone(), o))
                .map_err(|e| match e {
                    Error::InsufficientData(m) => Error::InsufficientData(format!("patient {id}: {m}")),
                    other => other,
                })
        })
        .collect()
}

/// Candidate index with the lowest validation loss; NaN losses never win and
/// ties go to the lower learning rate, then the lower seed.
pub fn select_best(candidates: &[TrainConfig], losses: &[f64]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate configurations".into()));
    }
    if candidates.len() != losses.len() {
        return Err(Error::Shape("one validation loss per candidate is required".into()));
    }
    let key = |i: usize| (losses[i], candidates[i].learning_rate, candidates[i].seed);
    (0..candidates.len())
        .filter(|&i| !losses[i].is_nan())
        .min_by(|&a, &b| {
            let (la, ra, sa) = key(a);
            let (lb, rb, sb) = key(b);
            la.total_cmp(&lb).then(ra.total_cmp(&rb)).then(sa.cmp(&sb))
        })
        .ok_or_else(|| Error::Training("every candidate has a NaN validation loss".into()))
}

/// Trains every candidate globally and returns the best one with its loss.
pub fn validation_select(
    candidates: &[TrainConfig],
    dataset: &Dataset,
    features: &FeatureConfig,
) -> Result<(TrainConfig, f64)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate configurations".into()));
    }
    if candidates.len() == 1 {
        let loss = train_global(dataset, &candidates[0], features).map(|o| o.val_loss).unwrap_or(f64::NAN);
        return Ok((candidates[0].clone(), loss));
    }
    let losses = candidates
        .iter()
        .map(|c| match train_global(dataset, c, features) {
            Ok(o) => Ok(o.val_loss),
            Err(Error::Training(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let i = select_best(candidates, &losses)?;
    Ok((candidates[i].clone(), losses[i]))
}

/// Models of one trial: a single global model, or one per patient.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub trial: usize,
    pub seed: u64,
    pub models: Vec<TrainOutcome>,
}

#[derive(Debug, Clone)]
pub struct TrialSet {
    pub mode: TrainingMode,
    pub features: FeatureConfig,
    pub trials: Vec<TrialRun>,
}

impl TrialSet {
    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.trials.iter().map(|t| t.seed).collect()
    }

    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        self.trials
            .iter()
            .flat_map(|t| t.models.iter().map(move |m| m.checkpoint(self.mode, t.trial, t.seed)))
            .collect()
    }
}

/// Runs `n_trials` independent trainings with seeds `config.seed + trial`.
pub fn run_trials(
    dataset: &Dataset,
    config: &TrainConfig,
    features: &FeatureConfig,
    n_trials: usize,
) -> Result<TrialSet> {
    if n_trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let trials = (0..n_trials)
        .map(|trial| {
            let seed = config.seed.wrapping_add(trial as u64);
            let cfg = TrainConfig { seed, ..config.clone() };
            let models = match config.mode {
                TrainingMode::Global => vec![train_global(dataset, &cfg, features)?],
                TrainingMode::Local => train_local(dataset, &cfg, features)?.into_iter().map(|(_, o)| o).collect(),
            };
            Ok(TrialRun { trial, seed, models })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSet { mode: config.mode, features: *features, trials })
}
