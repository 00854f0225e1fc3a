//! Feature configurations and forecasting models.

mod checkpoint;
mod nhits;
mod nn;

pub use checkpoint::{Checkpoint, CheckpointMeta, TrainingMode, CHECKPOINT_FORMAT};
pub use nhits::{BlockSpec, NhitsBlock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord, StaticFeatures, WindowSample, DEFAULT_HORIZON, DEFAULT_INPUT_LEN};
use crate::error::{Error, Result};
use crate::pk::{DoseEncoder, PkParams};
use nhits::{Nhits, NhitsTrace};
use nn::{Mlp, MlpTrace};

/// How insulin doses reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Glucose only.
    Univariate,
    /// Raw per-step bolus and basal doses.
    SparseExogenous,
    /// Running dose totals within the input window.
    SumTotal,
    /// Learned plasma-concentration curves.
    Pharmacokinetic,
}

impl FeatureMode {
    pub fn n_channels(self) -> usize {
        match self {
            FeatureMode::Univariate => 1,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub include_statics: bool,
}

impl FeatureConfig {
    pub fn new(mode: FeatureMode, include_statics: bool) -> Self {
        Self {
            mode,
            include_statics,
        }
    }
}

/// Channel index of each input series.
pub const GLUCOSE: usize = 0;
pub const CHO: usize = 1;
pub const BOLUS: usize = 2;
pub const BASAL: usize = 3;

/// Raw model inputs for one window. Channels are ordered glucose, CHO,
/// bolus, basal; each has the window's input length.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: Vec<Vec<f64>>,
    pub statics: Vec<f64>,
    /// `d channel / d k` for the bolus and basal channels in pharmacokinetic mode.
    pub dose_dk: Option<[Vec<f64>; 2]>,
}

/// Builds the encoder pair used by [`featurize_with`] for one patient.
pub fn dose_encoders(
    pk: &PkParams,
    patient_id: &str,
    step_minutes: f64,
    input_len: usize,
) -> Result<(DoseEncoder, DoseEncoder)> {
    let ks = pk.lookup(patient_id)?;
    Ok((
        DoseEncoder::new(ks.k_bolus, step_minutes, input_len)?,
        DoseEncoder::new(ks.k_basal, step_minutes, input_len)?,
    ))
}

pub fn featurize(
    record: &PatientRecord,
    window: &WindowSample,
    config: &FeatureConfig,
    pk: Option<&PkParams>,
) -> Result<FeatureTensor> {
    let encoders = match config.mode {
        FeatureMode::Pharmacokinetic => {
            let pk = pk.ok_or_else(|| {
                Error::Config("pharmacokinetic features need absorption constants".into())
            })?;
            Some(dose_encoders(
                pk,
                &record.patient_id,
                record.grid.step_minutes as f64,
                window.input_len,
            )?)
        }
        _ => None,
    };
    featurize_with(record, window, config, encoders.as_ref())
}

/// As [`featurize`], with precomputed dose encoders for pharmacokinetic mode.
pub fn featurize_with(
    record: &PatientRecord,
    window: &WindowSample,
    config: &FeatureConfig,
    encoders: Option<&(DoseEncoder, DoseEncoder)>,
) -> Result<FeatureTensor> {
    let h = window.history();
    if h.end > record.len() || window.input_len == 0 {
        return Err(Error::Shape(format!(
            "{}: history {h:?} outside record of {} steps",
            record.patient_id,
            record.len()
        )));
    }
    let mut channels = vec![record.glucose[h.clone()].to_vec()];
    let mut dose_dk = None;
    let bolus = &record.doses.bolus[h.clone()];
    let basal = &record.doses.basal[h.clone()];
    match config.mode {
        FeatureMode::Univariate => {}
        FeatureMode::SparseExogenous => {
            channels.push(record.cho[h.clone()].to_vec());
            channels.push(bolus.to_vec());
            channels.push(basal.to_vec());
        }
        FeatureMode::SumTotal => {
            channels.push(record.cho[h.clone()].to_vec());
            channels.push(running_total(bolus));
            channels.push(running_total(basal));
        }
        FeatureMode::Pharmacokinetic => {
            let (eb, ea) = encoders.ok_or_else(|| {
                Error::Config("pharmacokinetic features need absorption constants".into())
            })?;
            let cb = eb.encode(bolus)?;
            let ca = ea.encode(basal)?;
            channels.push(record.cho[h.clone()].to_vec());
            channels.push(cb.values);
            channels.push(ca.values);
            dose_dk = Some([cb.dk, ca.dk]);
        }
    }
    let statics = if config.include_statics {
        record.statics.encode()
    } else {
        Vec::new()
    };
    Ok(FeatureTensor {
        channels,
        statics,
        dose_dk,
    })
}

/// Featurizes windows of a cohort, caching one encoder pair per patient.
#[derive(Debug, Clone)]
pub struct CohortFeaturizer {
    config: FeatureConfig,
    encoders: Vec<Option<(DoseEncoder, DoseEncoder)>>,
}

impl CohortFeaturizer {
    pub fn new(dataset: &Dataset, config: FeatureConfig, pk: Option<&PkParams>, input_len: usize) -> Result<Self> {
        let encoders = match (config.mode, pk) {
            (FeatureMode::Pharmacokinetic, None) => {
                return Err(Error::Config("pharmacokinetic features need absorption constants".into()))
            }
            (FeatureMode::Pharmacokinetic, Some(pk)) => dataset
                .records
                .iter()
                .map(|r| dose_encoders(pk, &r.patient_id, r.grid.step_minutes as f64, input_len).map(Some))
                .collect::<Result<Vec<_>>>()?,
            _ => vec![None; dataset.len()],
        };
        Ok(Self { config, encoders })
    }

    pub fn featurize(&self, dataset: &Dataset, window: &WindowSample) -> Result<FeatureTensor> {
        let p = window.patient_index;
        let record = dataset
            .records
            .get(p)
            .ok_or_else(|| Error::Shape(format!("window refers to patient index {p}")))?;
        featurize_with(record, window, &self.config, self.encoders[p].as_ref())
    }
}

fn running_total(x: &[f64]) -> Vec<f64> {
    x.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Persistence,
    /// Simple exponential smoothing.
    Ses,
    Mlp,
    Nhits,
}

/// How glucose inputs and targets are put on a unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScaling {
    /// Shift and scale from training-set statistics.
    Global,
    /// Relative to the last glucose value of each window, scaled by
    /// training-set statistics.
    LastValue,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_len: usize,
    pub horizon: usize,
    /// Hidden layer widths (of the MLP, or of every NHITS block).
    pub hidden: Vec<usize>,
    pub blocks: Vec<BlockSpec>,
    pub ses_alpha: f64,
    pub target_scaling: TargetScaling,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Nhits,
            input_len: DEFAULT_INPUT_LEN,
            horizon: DEFAULT_HORIZON,
            hidden: vec![128, 128],
            blocks: vec![
                BlockSpec { pooling_kernel: 8, backcast_dim: None, forecast_dim: 2 },
                BlockSpec { pooling_kernel: 4, backcast_dim: None, forecast_dim: 3 },
                BlockSpec { pooling_kernel: 1, backcast_dim: None, forecast_dim: DEFAULT_HORIZON },
            ],
            ses_alpha: 0.5,
            target_scaling: TargetScaling::LastValue,
        }
    }
}

impl ModelSpec {
    pub fn with_architecture(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }
}

/// Per-channel input scaling plus the target transform.
///
/// Glucose is shifted and scaled; every other channel is only scaled, so a
/// zero dose or zero concentration stays zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scaling: TargetScaling,
    pub glucose_shift: f64,
    pub channel_scale: Vec<f64>,
    pub target_scale: f64,
}

impl Normalizer {
    pub fn identity(n_channels: usize, scaling: TargetScaling) -> Self {
        Self {
            scaling,
            glucose_shift: 0.0,
            channel_scale: vec![1.0; n_channels],
            target_scale: 1.0,
        }
    }

    /// Statistics over featurized training windows and their targets.
    pub fn fit(samples: &[(FeatureTensor, Vec<f64>)], scaling: TargetScaling) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InsufficientData("no windows to fit normalization".into()))?;
        let n_channels = first.0.channels.len();
        let positive = |v: f64| if v.is_finite() && v > 1e-8 { v } else { 1.0 };

        let mut channel_scale = vec![0.0; n_channels];
        for c in 1..n_channels {
            let (mut ss, mut n) = (0.0, 0usize);
            for (x, _) in samples {
                ss += x.channels[c].iter().map(|v| v * v).sum::<f64>();
                n += x.channels[c].len();
            }
            channel_scale[c] = positive((ss / n as f64).sqrt());
        }

        let (glucose_shift, glucose_scale, target_scale) = match scaling {
            TargetScaling::Global => {
                let vals: Vec<f64> = samples.iter().flat_map(|(x, _)| x.channels[GLUCOSE].iter().copied()).collect();
                let (m, s) = mean_sd(&vals);
                (m, positive(s), positive(s))
            }
            TargetScaling::LastValue => {
                let mut hist = Vec::new();
                let mut tgt = Vec::new();
                for (x, y) in samples {
                    let g = &x.channels[GLUCOSE];
                    let last = g[g.len() - 1];
                    hist.extend(g.iter().map(|v| v - last));
                    tgt.extend(y.iter().map(|v| v - last));
                }
                let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
                (0.0, positive(rms(&hist)), positive(rms(&tgt)))
            }
        };
        channel_scale[GLUCOSE] = glucose_scale;
        Ok(Self {
            scaling,
            glucose_shift,
            channel_scale,
            target_scale,
        })
    }

    fn anchor(&self, glucose: &[f64]) -> f64 {
        match self.scaling {
            TargetScaling::Global => self.glucose_shift,
            TargetScaling::LastValue => glucose[glucose.len() - 1],
        }
    }

    fn apply(&self, channels: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let anchor = self.anchor(&channels[GLUCOSE]);
        channels
            .iter()
            .enumerate()
            .map(|(c, ch)| {
                let s = self.channel_scale[c];
                if c == GLUCOSE {
                    ch.iter().map(|v| (v - anchor) / s).collect()
                } else {
                    ch.iter().map(|v| v / s).collect()
                }
            })
            .collect()
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Baseline,
    Mlp(Mlp),
    Nhits(Nhits),
}

/// A forecaster `f_theta` mapping a feature tensor to `horizon` glucose values (mg/dL).
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    spec: ModelSpec,
    features: FeatureConfig,
    n_statics: usize,
    normalizer: Normalizer,
    params: Vec<f64>,
    layout: Layout,
}

/// Intermediate values recorded by a training forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    inner: Option<Recorded>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.inner.is_some()
    }
}

#[derive(Debug)]
struct Recorded {
    raw_glucose: Vec<f64>,
    net: NetTrace,
}

#[derive(Debug)]
enum NetTrace {
    Baseline,
    Mlp(MlpTrace),
    Nhits(NhitsTrace),
}

/// Output of [`ForecastModel::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    /// Gradient with respect to each raw (unnormalized) input channel.
    pub channels: Vec<Vec<f64>>,
}

impl Gradients {
    /// Chains the bolus and basal channel gradients through `d channel / d k`.
    pub fn k_grads(&self, features: &FeatureTensor) -> Option<(f64, f64)> {
        let [db, da] = features.dose_dk.as_ref()?;
        let dot = |g: &[f64], d: &[f64]| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        Some((dot(&self.channels[BOLUS], db), dot(&self.channels[BASAL], da)))
    }
}

impl ForecastModel {
    /// A freshly initialized model. Parameter initialization is seeded.
    pub fn new(
        spec: ModelSpec,
        features: FeatureConfig,
        n_statics: usize,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        let layout = Self::layout(&spec, &features, n_statics)?;
        let n = match &layout {
            Layout::Baseline => 0,
            Layout::Mlp(m) => m.n_params(),
            Layout::Nhits(n) => n.n_params(),
        };
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &layout {
            Layout::Baseline => {}
            Layout::Mlp(m) => m.init(&mut params, 0.1, &mut rng),
            Layout::Nhits(n) => n.init(&mut params, &mut rng),
        }
        Self::from_parts(spec, features, n_statics, normalizer, params)
    }

    pub fn from_parts(
        spec: ModelSpec,
        features: FeatureConfig,
        n_statics: usize,
        normalizer: Normalizer,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Self::layout(&spec, &features, n_statics)?;
        let expect = match &layout {
            Layout::Baseline => 0,
            Layout::Mlp(m) => m.n_params(),
            Layout::Nhits(n) => n.n_params(),
        };
        if params.len() != expect {
            return Err(Error::Shape(format!(
                "model expects {expect} parameters, got {}",
                params.len()
            )));
        }
        if normalizer.channel_scale.len() != features.mode.n_channels() {
            return Err(Error::Shape("normalizer channel count mismatch".into()));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Validation(format!("non-finite parameter at {i}")));
        }
        Ok(Self {
            spec,
            features,
            n_statics,
            normalizer,
            params,
            layout,
        })
    }

    fn layout(spec: &ModelSpec, features: &FeatureConfig, n_statics: usize) -> Result<Layout> {
        if spec.input_len == 0 || spec.horizon == 0 {
            return Err(Error::Config("input length and horizon must be positive".into()));
        }
        let n_channels = features.mode.n_channels();
        Ok(match spec.architecture {
            Architecture::Persistence => Layout::Baseline,
            Architecture::Ses => {
                if !(spec.ses_alpha > 0.0 && spec.ses_alpha <= 1.0) {
                    return Err(Error::Config(format!("ses_alpha {} not in (0, 1]", spec.ses_alpha)));
                }
                Layout::Baseline
            }
            Architecture::Mlp => {
                let mut sizes = vec![n_channels * spec.input_len + n_statics];
                sizes.extend_from_slice(&spec.hidden);
                sizes.push(spec.horizon);
                Layout::Mlp(Mlp::new(&sizes, 0))
            }
            Architecture::Nhits => Layout::Nhits(Nhits::new(
                &spec.blocks,
                spec.input_len,
                spec.horizon,
                n_channels,
                n_statics,
                &spec.hidden,
            )?),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn n_statics(&self) -> usize {
        self.n_statics
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        !self.params.is_empty()
    }

    fn check_shape(&self, x: &FeatureTensor) -> Result<()> {
        let n_channels = self.features.mode.n_channels();
        if x.channels.len() != n_channels {
            return Err(Error::Shape(format!(
                "model expects {n_channels} channels, got {}",
                x.channels.len()
            )));
        }
        if let Some(c) = x.channels.iter().position(|c| c.len() != self.spec.input_len) {
            return Err(Error::Shape(format!(
                "channel {c} has length {}, model expects {}",
                x.channels[c].len(),
                self.spec.input_len
            )));
        }
        if x.statics.len() != self.n_statics {
            return Err(Error::Shape(format!(
                "model expects {} static features, got {}",
                self.n_statics,
                x.statics.len()
            )));
        }
        Ok(())
    }

    /// Deterministic forecast with dropout disabled.
    pub fn forward(&self, x: &FeatureTensor) -> Result<Vec<f64>> {
        self.run::<ChaCha8Rng>(x, None).map(|(y, _)| y)
    }

    /// Forecast that records a tape for [`backward`](Self::backward). Dropout
    /// is applied to hidden layers when `dropout` is given with a positive rate.
    pub fn forward_train<R: Rng>(
        &self,
        x: &FeatureTensor,
        dropout: Option<(f64, &mut R)>,
        tape: &mut Tape,
    ) -> Result<Vec<f64>> {
        let (y, rec) = self.run(x, dropout)?;
        tape.inner = Some(rec);
        Ok(y)
    }

    fn run<R: Rng>(&self, x: &FeatureTensor, dropout: Option<(f64, &mut R)>) -> Result<(Vec<f64>, Recorded)> {
        self.check_shape(x)?;
        let glucose = &x.channels[GLUCOSE];
        let h = self.spec.horizon;
        let (y, net) = match &self.layout {
            Layout::Baseline => {
                let level = match self.spec.architecture {
                    Architecture::Ses => ses_level(glucose, self.spec.ses_alpha),
                    _ => glucose[glucose.len() - 1],
                };
                (vec![level; h], NetTrace::Baseline)
            }
            Layout::Mlp(mlp) => {
                let mut input: Vec<f64> = self.normalizer.apply(&x.channels).concat();
                input.extend_from_slice(&x.statics);
                let (out, trace) = mlp.forward(&self.params, input, dropout);
                (self.denormalize(glucose, &out), NetTrace::Mlp(trace))
            }
            Layout::Nhits(net) => {
                let norm = self.normalizer.apply(&x.channels);
                let (out, trace) = net.forward(&self.params, &norm, &x.statics, dropout);
                (self.denormalize(glucose, &out), NetTrace::Nhits(trace))
            }
        };
        Ok((
            y,
            Recorded {
                raw_glucose: glucose.clone(),
                net,
            },
        ))
    }

    fn denormalize(&self, glucose: &[f64], out: &[f64]) -> Vec<f64> {
        let anchor = self.normalizer.anchor(glucose);
        out.iter().map(|o| anchor + self.normalizer.target_scale * o).collect()
    }

    /// Reverse-mode gradients of `sum_h grad_output[h] * y_hat[h]` with
    /// respect to the parameters and every raw input channel.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<Gradients> {
        let rec = tape
            .inner
            .as_ref()
            .ok_or_else(|| Error::Training("backward called before a recorded forward pass".into()))?;
        if grad_output.len() != self.spec.horizon {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, horizon is {}",
                grad_output.len(),
                self.spec.horizon
            )));
        }
        let l = self.spec.input_len;
        let n_channels = self.features.mode.n_channels();
        let mut theta = vec![0.0; self.params.len()];
        let g_sum: f64 = grad_output.iter().sum();

        let norm_grads = match (&self.layout, &rec.net) {
            (Layout::Baseline, _) => {
                let mut channels = vec![vec![0.0; l]; n_channels];
                match self.spec.architecture {
                    Architecture::Ses => {
                        for (j, w) in ses_weights(l, self.spec.ses_alpha).into_iter().enumerate() {
                            channels[GLUCOSE][j] = g_sum * w;
                        }
                    }
                    _ => channels[GLUCOSE][l - 1] = g_sum,
                }
                return Ok(Gradients { theta, channels });
            }
            (Layout::Mlp(mlp), NetTrace::Mlp(trace)) => {
                let gout: Vec<f64> = grad_output.iter().map(|g| g * self.normalizer.target_scale).collect();
                let gx = mlp.backward(&self.params, trace, &gout, &mut theta);
                gx[..n_channels * l].chunks(l).map(<[f64]>::to_vec).collect::<Vec<_>>()
            }
            (Layout::Nhits(net), NetTrace::Nhits(trace)) => {
                let gout: Vec<f64> = grad_output.iter().map(|g| g * self.normalizer.target_scale).collect();
                net.backward(&self.params, trace, &gout, &mut theta)
            }
            _ => return Err(Error::Training("tape does not match model architecture".into())),
        };

        let mut channels: Vec<Vec<f64>> = norm_grads
            .into_iter()
            .enumerate()
            .map(|(c, g)| {
                let s = self.normalizer.channel_scale[c];
                g.into_iter().map(|v| v / s).collect()
            })
            .collect();
        // The anchor itself depends on the last glucose value.
        if self.normalizer.scaling == TargetScaling::LastValue {
            let through_inputs: f64 = channels[GLUCOSE].iter().sum();
            channels[GLUCOSE][l - 1] += g_sum - through_inputs;
        }
        debug_assert_eq!(rec.raw_glucose.len(), l);
        Ok(Gradients { theta, channels })
    }

    /// Encodes a record's static features for this model; mismatched cohorts
    /// are an error.
    pub fn check_statics(&self, statics: &StaticFeatures) -> Result<()> {
        if self.features.include_statics && statics.encode().len() != self.n_statics {
            return Err(Error::Shape(format!(
                "model was trained with {} static features, record provides {}",
                self.n_statics,
                statics.encode().len()
            )));
        }
        Ok(())
    }
}

fn ses_level(y: &[f64], alpha: f64) -> f64 {
    y[1..].iter().fold(y[0], |level, v| alpha * v + (1.0 - alpha) * level)
}

/// `d level / d y_j` of simple exponential smoothing.
fn ses_weights(len: usize, alpha: f64) -> Vec<f64> {
    (0..len)
        .map(|j| {
            let age = (len - 1 - j) as i32;
            if j == 0 {
                (1.0 - alpha).powi(age)
            } else {
                alpha * (1.0 - alpha).powi(age)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DoseSeries, TimeGrid};

    fn record(n: usize) -> PatientRecord {
        let mut doses = DoseSeries::zeros(n);
        doses.bolus[3] = 2.0;
        doses.bolus[5] = 3.0;
        doses.basal[0] = 1.0;
        PatientRecord::new(
            "p0",
            TimeGrid::new(0, 5, n).unwrap(),
            (0..n).map(|i| 120.0 + (i as f64 * 0.3).sin() * 20.0).collect(),
            (0..n).map(|i| if i == 2 { 40.0 } else { 0.0 }).collect(),
            doses,
            vec![true; n],
            StaticFeatures {
                one_hot_patient: vec![1.0],
                weight_kg: Some(70.0),
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn window(l: usize, h: usize) -> WindowSample {
        WindowSample { patient_index: 0, history_start: 0, input_len: l, horizon: h }
    }

    #[test]
    fn sum_total_is_cumulative() {
        assert_eq!(running_total(&[0.0, 2.0, 0.0, 3.0]), vec![0.0, 2.0, 2.0, 5.0]);
    }

    #[test]
    fn channel_counts_and_shared_glucose() {
        let r = record(12);
        let w = window(8, 2);
        let pk = PkParams::uniform(vec!["p0".into()], 1.3, 1.5).unwrap();
        let mut glucose = None;
        for mode in [
            FeatureMode::Univariate,
            FeatureMode::SparseExogenous,
            FeatureMode::SumTotal,
            FeatureMode::Pharmacokinetic,
        ] {
            let x = featurize(&r, &w, &FeatureConfig::new(mode, true), Some(&pk)).unwrap();
            assert_eq!(x.channels.len(), mode.n_channels());
            let g = glucose.get_or_insert_with(|| x.channels[0].clone());
            assert_eq!(&x.channels[0], g);
            assert_eq!(x.statics.len(), StaticFeatures::encoded_len(1));
        }
        let err = featurize(&r, &w, &FeatureConfig::new(FeatureMode::Pharmacokinetic, false), None);
        assert!(err.is_err());
    }

    #[test]
    fn pk_channels_match_encoder() {
        let r = record(12);
        let w = window(8, 2);
        let pk = PkParams::uniform(vec!["p0".into()], 1.3, 1.5).unwrap();
        let x = featurize(&r, &w, &FeatureConfig::new(FeatureMode::Pharmacokinetic, false), Some(&pk)).unwrap();
        let (cb, ca) = crate::pk::encode_record(&r, &pk, &w).unwrap();
        assert_eq!(x.channels[BOLUS], cb.values);
        assert_eq!(x.channels[BASAL], ca.values);
        assert_eq!(x.channels[CHO], r.cho[..8].to_vec());
    }

    #[test]
    fn persistence_repeats_last_value() {
        let spec = ModelSpec { horizon: 6, input_len: 4, ..ModelSpec::with_architecture(Architecture::Persistence) };
        let fc = FeatureConfig::new(FeatureMode::Univariate, false);
        let m = ForecastModel::new(spec, fc, 0, Normalizer::identity(1, TargetScaling::Global), 0).unwrap();
        let x = FeatureTensor { channels: vec![vec![1.0, 5.0, 3.0, 142.0]], statics: vec![], dose_dk: None };
        assert_eq!(m.forward(&x).unwrap(), vec![142.0; 6]);
    }

    #[test]
    fn ses_level_and_weights() {
        let y = [100.0, 110.0, 90.0];
        let level = ses_level(&y, 0.5);
        assert_eq!(level, 0.5 * 90.0 + 0.5 * (0.5 * 110.0 + 0.5 * 100.0));
        let w = ses_weights(3, 0.5);
        let recon: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((recon - level).abs() < 1e-12);
    }

    #[test]
    fn zero_parameter_mlp_outputs_bias() {
        let spec = ModelSpec { input_len: 8, horizon: 2, hidden: vec![4], ..ModelSpec::with_architecture(Architecture::Mlp) };
        let fc = FeatureConfig::new(FeatureMode::SparseExogenous, false);
        let norm = Normalizer::identity(4, TargetScaling::Global);
        let m0 = ForecastModel::new(spec.clone(), fc, 0, norm.clone(), 1).unwrap();
        let mut params = vec![0.0; m0.params().len()];
        let x = featurize(&record(12), &window(8, 2), &fc, None).unwrap();
        let m = ForecastModel::from_parts(spec.clone(), fc, 0, norm.clone(), params.clone()).unwrap();
        assert_eq!(m.forward(&x).unwrap(), vec![0.0, 0.0]);
        let n = params.len();
        params[n - 2] = 1.5;
        params[n - 1] = -0.5;
        let m = ForecastModel::from_parts(spec, fc, 0, norm, params).unwrap();
        assert_eq!(m.forward(&x).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn backward_requires_forward() {
        let spec = ModelSpec { input_len: 8, horizon: 2, hidden: vec![4], ..ModelSpec::with_architecture(Architecture::Mlp) };
        let fc = FeatureConfig::new(FeatureMode::Univariate, false);
        let m = ForecastModel::new(spec, fc, 0, Normalizer::identity(1, TargetScaling::Global), 1).unwrap();
        assert!(m.backward(&Tape::new(), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = ModelSpec { input_len: 8, horizon: 2, hidden: vec![4], ..ModelSpec::with_architecture(Architecture::Mlp) };
        let fc = FeatureConfig::new(FeatureMode::SparseExogenous, false);
        let m = ForecastModel::new(spec, fc, 0, Normalizer::identity(4, TargetScaling::Global), 1).unwrap();
        let x = FeatureTensor { channels: vec![vec![0.0; 8]], statics: vec![], dose_dk: None };
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }
}
