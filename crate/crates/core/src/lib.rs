//! Forecasting blood glucose with learned pharmacokinetic dose encodings.
//!
//! Sparse insulin dose events are turned into dense plasma-concentration
//! features by a scaled log-normal curve whose shape constant is learned per
//! patient, while the forecasting network itself is shared across patients
//! (a hybrid global-local model).
//!
//! ## Modules
//!
//! - [`data`]: time grids, patient records, event CSV ingestion, windowing
//! - [`pk`]: concentration curves, stacking matrix, dose superposition and
//!   gradients with respect to the absorption constants
//! - [`model`]: feature configurations and forecasters (persistence, SES,
//!   MLP, NHITS-style stack) with reverse-mode gradients
//! - [`train`]: Huber loss, Adam, global/local training, validation selection
//! - [`eval`]: rolling forecasts, MAE/RMSE, counterfactual dose analysis,
//!   global-vs-local comparison
//! - [`stats`]: paired one-sided t-test on top of the Student-t CDF
//! - [`synth`]: synthetic multi-patient cohorts
//! - [`quad`]: adaptive Gauss-Kronrod quadrature

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pk;
pub mod quad;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub use data::{
    forward_fill, make_windows, split_train_test, Dataset, DoseSeries, PatientRecord,
    StaticFeatures, TimeGrid, WindowSample,
};
pub use eval::{critical_mask, mae, rmse, EvalReport};
pub use model::{FeatureConfig, FeatureMode, ForecastModel};
pub use pk::{concentration_at, concentration_grad_k, encode_doses, PkParams, StackingMatrix};
pub use stats::paired_t_test_one_sided;
pub use train::{huber_loss, TrainConfig};
