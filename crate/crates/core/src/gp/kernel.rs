use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-exponential ARD kernel hyperparameters.
///
/// Values live in the model's working coordinates: lengthscales are measured
/// on inputs scaled to `[0, 1]`, and both variances on standardized outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(dims: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self { lengthscales: vec![lengthscale; dims], signal_variance, noise_variance }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::InvalidParameter("at least one lengthscale is required".into()));
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "lengthscales must be positive, got {:?}",
                self.lengthscales
            )));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub(crate) fn inverse_squared_lengthscales(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

#[inline]
pub(crate) fn squared_exponential(a: &[f64], b: &[f64], inv_ls2: &[f64], signal_variance: f64) -> f64 {
    let mut r2 = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(inv_ls2) {
        let d = x - y;
        r2 += d * d * w;
    }
    signal_variance * (-0.5 * r2).exp()
}
