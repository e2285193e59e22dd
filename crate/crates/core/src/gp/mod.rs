//! Exact Gaussian process regression for black-box constraints.
//!
//! Each constraint gets an independent GP with a squared-exponential ARD
//! kernel and a constant prior mean equal to the training-output mean.
//! Inputs are scaled to `[0, 1]`, outputs are standardized before fitting,
//! and every prediction is reported back in original units.

mod dataset;
mod fit;
mod kernel;
mod model;

pub use dataset::Dataset;
pub(crate) use dataset::bitwise_eq;
pub use fit::{fit, FitConfig};
pub use kernel::KernelParams;
pub use model::{
    log_marginal_likelihood, GpModel, GpSettings, InputScaling, JitterSchedule, NoiseMode,
    PosteriorPrediction,
};
