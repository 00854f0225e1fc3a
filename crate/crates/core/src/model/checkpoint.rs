//! Self-describing JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureConfig, ForecastModel, ModelSpec, Normalizer};
use crate::error::{Error, Result};
use crate::pk::PkParams;

pub const CHECKPOINT_FORMAT: &str = "pkforecast-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainingMode,
    pub trial: usize,
    pub seed: u64,
    /// Optimizer step of the selected parameters.
    pub best_step: usize,
    pub val_loss: f64,
}

/// A trained model with everything needed to featurize and forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub features: FeatureConfig,
    pub n_statics: usize,
    pub normalizer: Normalizer,
    pub params: Vec<f64>,
    /// Absorption constants, present in pharmacokinetic mode.
    pub pk: Option<PkParams>,
    /// Patients the model was trained on, in one-hot order.
    pub patient_ids: Vec<String>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(
        model: &ForecastModel,
        pk: Option<PkParams>,
        patient_ids: Vec<String>,
        meta: CheckpointMeta,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: model.spec().clone(),
            features: *model.feature_config(),
            n_statics: model.n_statics(),
            normalizer: model.normalizer().clone(),
            params: model.params().to_vec(),
            pk,
            patient_ids,
            meta,
        }
    }

    pub fn model(&self) -> Result<ForecastModel> {
        ForecastModel::from_parts(
            self.spec.clone(),
            self.features,
            self.n_statics,
            self.normalizer.clone(),
            self.params.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        if ck.features.mode == super::FeatureMode::Pharmacokinetic && ck.pk.is_none() {
            return Err(Error::Config("pharmacokinetic checkpoint without absorption constants".into()));
        }
        // Validates shapes and finiteness.
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
