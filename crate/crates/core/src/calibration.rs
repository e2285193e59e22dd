//! Status-aware candidate generation.
//!
//! Some processes expose a measurement `V` that depends on both the
//! controllable settings `x_c` and an unobserved machine status that stays
//! fixed within one session but drifts between sessions. A GP `M_V` learns
//! `x_c -> V` from the initialization data; one baseline experiment at the
//! start of a session yields the offset `δ = V_b - M_V(x_c_b)`, and every
//! grid point of the controllable space is expanded to a full input
//! `(x_c, M_V(x_c) + δ)`.
//!
//! In the dataset the status measurement is stored as the last input column.

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::gp::{bitwise_eq, fit, Dataset, FitConfig, GpModel, PosteriorPrediction};

/// GP from controllable inputs to the status-dependent measurement.
#[derive(Clone, Debug)]
pub struct StatusModel {
    model: GpModel,
}

impl StatusModel {
    pub fn controllable_dims(&self) -> usize {
        self.model.dims()
    }

    pub fn gp(&self) -> &GpModel {
        &self.model
    }

    pub fn predict(&self, x_c: &[f64]) -> Result<PosteriorPrediction> {
        self.model.predict(x_c)
    }

    /// Whether `x_c` is bitwise one of the training inputs.
    pub fn was_trained_on(&self, x_c: &[f64]) -> bool {
        self.model.training_inputs().iter().any(|t| bitwise_eq(t, x_c))
    }
}

/// Fits `M_V` on the first `controllable_dims` input columns of `dataset`,
/// using the remaining input column as the target.
///
/// Pass only initialization rows. Domain bounds in `config`, if given for the
/// full input vector, are truncated to the controllable part.
pub fn fit_status_model(dataset: &Dataset, controllable_dims: usize, config: &FitConfig) -> Result<StatusModel> {
    let status_dims = dataset.dims().checked_sub(controllable_dims).unwrap_or(0);
    if controllable_dims == 0 || dataset.dims() <= controllable_dims {
        return Err(Error::InvalidParameter(format!(
            "dataset has {} input columns; expected {} controllable columns followed by the status measurement",
            dataset.dims(),
            controllable_dims
        )));
    }
    if status_dims > 1 {
        return Err(Error::InvalidParameter(format!(
            "only a single status measurement is supported, found {status_dims} status columns"
        )));
    }
    let mut status = Dataset::new(controllable_dims, 1)?.with_duplicates(true);
    for x in dataset.inputs() {
        status.push(x[..controllable_dims].to_vec(), &[x[controllable_dims]])?;
    }
    let mut config = config.clone();
    if let Some(bounds) = &mut config.settings.input_bounds {
        if bounds.len() == dataset.dims() {
            bounds.truncate(controllable_dims);
        }
    }
    Ok(StatusModel { model: fit(&status, 0, &config)? })
}

/// Per-session shift of the status measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOffset {
    pub baseline_input: Vec<f64>,
    pub baseline_measured: f64,
    /// `M_V(baseline_input)`.
    pub predicted: f64,
    pub delta: f64,
}

impl SessionOffset {
    pub fn zero() -> Self {
        Self { baseline_input: Vec::new(), baseline_measured: 0.0, predicted: 0.0, delta: 0.0 }
    }
}

/// Offset from a baseline experiment repeated at a training input.
///
/// Fails when `baseline_input` was not part of the status model's training
/// data; see [`compute_offset_unchecked`] to override.
pub fn compute_offset(model: &StatusModel, baseline_input: &[f64], baseline_measured: f64) -> Result<SessionOffset> {
    if !model.was_trained_on(baseline_input) {
        return Err(Error::InvalidParameter(format!(
            "baseline input {baseline_input:?} is not in the initialization set"
        )));
    }
    compute_offset_unchecked(model, baseline_input, baseline_measured)
}

/// Like [`compute_offset`] but only warns when the baseline is off the training set.
pub fn compute_offset_unchecked(
    model: &StatusModel,
    baseline_input: &[f64],
    baseline_measured: f64,
) -> Result<SessionOffset> {
    if !model.was_trained_on(baseline_input) {
        tracing::warn!(?baseline_input, "baseline input is not in the initialization set");
    }
    let predicted = model.predict(baseline_input)?.mean;
    Ok(SessionOffset {
        baseline_input: baseline_input.to_vec(),
        baseline_measured,
        predicted,
        delta: baseline_measured - predicted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Rectangular grid over the controllable inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    /// Largest number of grid points accepted.
    pub cap: usize,
    /// Coordinate tolerance when excluding already-evaluated settings.
    #[serde(default)]
    pub exclusion_tolerance: f64,
}

impl GridSpec {
    pub const DEFAULT_CAP: usize = 1_000_000;

    pub fn new(axes: Vec<GridAxis>) -> Self {
        Self { axes, cap: Self::DEFAULT_CAP, exclusion_tolerance: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::InvalidParameter("grid needs at least one axis".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if !(a.lower.is_finite() && a.upper.is_finite() && a.lower < a.upper) || a.count < 2 {
                return Err(Error::InvalidParameter(format!(
                    "grid axis {i} needs finite bounds with lower < upper and at least 2 points, got {a:?}"
                )));
            }
        }
        if !(self.exclusion_tolerance >= 0.0) {
            return Err(Error::InvalidParameter("exclusion tolerance must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of grid points, or `None` on overflow.
    pub fn size(&self) -> Option<usize> {
        self.axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.count))
    }

    /// All grid points, last axis varying fastest.
    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let total = self.size().filter(|&n| n <= self.cap).ok_or(Error::GridTooLarge {
            required: self.size().unwrap_or(usize::MAX),
            cap: self.cap,
        })?;
        let axes: Vec<Vec<f64>> =
            self.axes.iter().map(|a| crate::problems::axis(a.lower, a.upper, a.count)).collect();
        Ok((0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; axes.len()];
                for d in (0..axes.len()).rev() {
                    let m = axes[d].len();
                    p[d] = axes[d][idx % m];
                    idx /= m;
                }
                p
            })
            .collect())
    }
}

/// Expands the controllable grid into full candidates `(x_c, M_V(x_c) + δ)`,
/// skipping settings whose `x_c` already appears in `dataset`.
pub fn generate_candidates(
    grid: &GridSpec,
    model: &StatusModel,
    offset: &SessionOffset,
    dataset: &Dataset,
) -> Result<CandidateSet> {
    let dc = model.controllable_dims();
    if grid.axes.len() != dc {
        return Err(Error::DimensionMismatch { expected: dc, got: grid.axes.len() });
    }
    if !dataset.is_empty() && dataset.dims() != dc + 1 {
        return Err(Error::DimensionMismatch { expected: dc + 1, got: dataset.dims() });
    }
    let tol = grid.exclusion_tolerance;
    let evaluated: Vec<&[f64]> = dataset.inputs().iter().map(|x| &x[..dc]).collect();
    let seen = |p: &[f64]| {
        evaluated.iter().any(|e| {
            if tol == 0.0 {
                bitwise_eq(e, p)
            } else {
                e.iter().zip(p).all(|(a, b)| (a - b).abs() <= tol)
            }
        })
    };
    let kept: Vec<Vec<f64>> = grid.points()?.into_iter().filter(|p| !seen(p)).collect();
    let refs: Vec<&[f64]> = kept.iter().map(Vec::as_slice).collect();
    let predictions = model.gp().predict_many(&refs)?;
    let points = kept
        .into_iter()
        .zip(predictions)
        .map(|(mut p, pred)| {
            p.push(pred.mean + offset.delta);
            p
        })
        .collect();
    CandidateSet::new(points)
}
