//! Python bindings: the encoder, metrics and statistics as functions, plus
//! thin handles over cohorts, training configurations and checkpoints.

use pkforecast::data::{read_aligned_csv, Dataset as CoreDataset};
use pkforecast::eval::{evaluate_checkpoints, CounterfactualTable, KTable};
use pkforecast::model::{Checkpoint as CoreCheckpoint, FeatureConfig, FeatureMode};
use pkforecast::synth::{generate, SynthConfig, SynthMode};
use pkforecast::train::{run_trials, TrainConfig as CoreTrainConfig};
use pkforecast::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Training(_) | Error::InsufficientData(_)) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn feature_mode(name: &str) -> PyResult<FeatureMode> {
    Ok(match name {
        "univariate" => FeatureMode::Univariate,
        "sparse" => FeatureMode::SparseExogenous,
        "sumtotal" => FeatureMode::SumTotal,
        "pk" => FeatureMode::Pharmacokinetic,
        other => return Err(PyValueError::new_err(format!("unknown feature mode `{other}`"))),
    })
}

/// Log-normal concentration at `t` minutes after a dose `d` with absorption constant `k`.
#[pyfunction]
fn concentration_at(t: f64, d: f64, k: f64) -> PyResult<f64> {
    pkforecast::concentration_at(t, d, k).map_err(to_py)
}

#[pyfunction]
fn concentration_grad_k(t: f64, d: f64, k: f64) -> PyResult<f64> {
    pkforecast::concentration_grad_k(t, d, k).map_err(to_py)
}

/// Stacked concentration over a dose window sampled every `step_minutes`.
#[pyfunction]
#[pyo3(signature = (doses, k, step_minutes = 5.0))]
fn encode_doses(doses: Vec<f64>, k: f64, step_minutes: f64) -> PyResult<Vec<f64>> {
    Ok(pkforecast::encode_doses(&doses, k, step_minutes).map_err(to_py)?.values)
}

#[pyfunction]
fn mae(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    pkforecast::mae(&y, &y_hat).map_err(to_py)
}

#[pyfunction]
fn rmse(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    pkforecast::rmse(&y, &y_hat).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (y, y_hat, delta = 1.0))]
fn huber_loss(y: Vec<f64>, y_hat: Vec<f64>, delta: f64) -> PyResult<f64> {
    pkforecast::huber_loss(&y, &y_hat, delta).map_err(to_py)
}

/// One-sided paired t-test of `mean(a - b) > 0`, returned as `(t, p)`.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = pkforecast::paired_t_test_one_sided(&a, &b).map_err(to_py)?;
    Ok((r.t_statistic, r.p_value))
}

#[pyclass(module = "pkforecast", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic cohort; `mode` is `minimal_model` or `encoder_oracle`.
    #[staticmethod]
    #[pyo3(signature = (n_patients, days, seed = 0, mode = "minimal_model"))]
    fn simulate(n_patients: usize, days: usize, seed: u64, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "minimal_model" => SynthMode::MinimalModel,
            "encoder_oracle" => SynthMode::EncoderOracle,
            other => return Err(PyValueError::new_err(format!("unknown synth mode `{other}`"))),
        };
        let cohort = generate(&SynthConfig::new(n_patients, days, seed, mode)).map_err(to_py)?;
        Ok(Self { inner: cohort.dataset })
    }

    /// Aligned CSVs, one per patient; the patient id is the file stem.
    #[staticmethod]
    fn from_csvs(paths: Vec<String>) -> PyResult<Self> {
        let records = paths
            .iter()
            .map(|p| {
                let id = std::path::Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                read_aligned_csv(p, &id)
            })
            .collect::<pkforecast::Result<Vec<_>>>()
            .map_err(to_py)?;
        Ok(Self { inner: CoreDataset::new(records).map_err(to_py)? })
    }

    #[getter]
    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn glucose(&self, patient: &str) -> PyResult<Vec<f64>> {
        let i = self.inner.index_of(patient).ok_or_else(|| PyValueError::new_err(format!("unknown patient `{patient}`")))?;
        Ok(self.inner.records[i].glucose.clone())
    }

    fn bolus(&self, patient: &str) -> PyResult<Vec<f64>> {
        let i = self.inner.index_of(patient).ok_or_else(|| PyValueError::new_err(format!("unknown patient `{patient}`")))?;
        Ok(self.inner.records[i].doses.bolus.clone())
    }

    /// `(train, test)` with the trailing `test_steps` of each patient held out.
    fn split(&self, test_steps: usize) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split(test_steps).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }
}

#[pyclass(module = "pkforecast", skip_from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreTrainConfig,
}

#[pymethods]
impl TrainConfig {
    /// Defaults, overridden by the fields of an optional JSON object.
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreTrainConfig::from_json(json).map_err(to_py)? })
    }

    #[getter]
    fn training_steps(&self) -> usize {
        self.inner.training_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(module = "pkforecast", from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn trial(&self) -> usize {
        self.inner.meta.trial
    }

    #[getter]
    fn patient_ids(&self) -> Vec<String> {
        self.inner.patient_ids.clone()
    }

    /// Learned `(k_bolus, k_basal)` per patient; empty for non-pharmacokinetic models.
    fn absorption_constants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        if let Some(pk) = &self.inner.pk {
            for (i, id) in pk.patient_ids().iter().enumerate() {
                d.set_item(id, (pk.k_bolus(i), pk.k_basal(i)))?;
            }
        }
        Ok(d)
    }

    /// Mean final-horizon forecasts `(original, zeroed, scaled)` per patient.
    #[pyo3(signature = (dataset, scale = 10.0, first_origin = 0))]
    fn counterfactual<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        scale: f64,
        first_origin: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let model = self.inner.model().map_err(to_py)?;
        let data = dataset.inner.select(&self.inner.patient_ids).map_err(to_py)?;
        let d = PyDict::new(py);
        for r in &data.records {
            let t = CounterfactualTable::compute(&model, self.inner.pk.as_ref(), r, scale, first_origin).map_err(to_py)?;
            d.set_item(&r.patient_id, t.means())?;
        }
        Ok(d)
    }
}

/// Trains `trials` models (or per-patient sets in local mode); returns their checkpoints.
#[pyfunction]
#[pyo3(signature = (dataset, features, config = None, trials = 1, include_statics = true))]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    features: &str,
    config: Option<&TrainConfig>,
    trials: usize,
    include_statics: bool,
) -> PyResult<Vec<Checkpoint>> {
    let cfg = match config {
        Some(c) => c.inner.clone(),
        None => CoreTrainConfig::default(),
    };
    let features = FeatureConfig::new(feature_mode(features)?, include_statics);
    let data = dataset.inner.clone();
    let set = py.detach(move || run_trials(&data, &cfg, &features, trials)).map_err(to_py)?;
    Ok(set.checkpoints().into_iter().map(|inner| Checkpoint { inner }).collect())
}

/// Rolling-forecast evaluation over the trailing `test_steps`; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (checkpoints, dataset, test_steps, label = "model"))]
fn evaluate(checkpoints: Vec<Checkpoint>, dataset: &Dataset, test_steps: usize, label: &str) -> PyResult<String> {
    let cks: Vec<CoreCheckpoint> = checkpoints.into_iter().map(|c| c.inner).collect();
    evaluate_checkpoints(label, &cks, &dataset.inner, test_steps).map_err(to_py)?.to_json().map_err(to_py)
}

/// Paired test of `k_bolus > k_basal` over every (patient, trial): `(mean_k_bolus, mean_k_basal, t, p)`.
#[pyfunction]
fn inspect_k(checkpoints: Vec<Checkpoint>) -> PyResult<(f64, f64, f64, f64)> {
    let cks: Vec<CoreCheckpoint> = checkpoints.into_iter().map(|c| c.inner).collect();
    let t = KTable::from_checkpoints(&cks).map_err(to_py)?;
    Ok((t.mean_k_bolus, t.mean_k_basal, t.test.t_statistic, t.test.p_value))
}

#[pymodule]
fn pkforecast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(concentration_at, m)?)?;
    m.add_function(wrap_pyfunction!(concentration_grad_k, m)?)?;
    m.add_function(wrap_pyfunction!(encode_doses, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(huber_loss, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_k, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
