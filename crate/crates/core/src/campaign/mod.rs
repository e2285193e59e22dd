//! Persistent human-in-the-loop campaigns and synthetic process studies.
//!
//! A campaign session keeps the evaluated data, the pending batch, the
//! current status offset and an append-only event log in one JSON file.
//! Each command loads the session under a lock file, applies one state
//! transition, and writes the result back atomically.

mod session;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::acquisition::ConstraintSpec;
use crate::batch::BatchConfig;
use crate::calibration::GridSpec;
use crate::candidates::Objective;
use crate::error::{Error, Result};
use crate::gp::{Dataset, FitConfig, NoiseMode};

pub use session::{
    acquire_lock, commit_temp, load_session, replay, save_session, with_session, write_temp, CampaignStatus, Event,
    IncumbentSummary, RecordOutcome, SessionLock, SessionState,
};
pub use synthetic::{
    aps_config, aps_initial_dataset, fdm_config, fdm_pi_switch_study, infeasible_init, simulate_aps, Bump, FdmRun,
    FdmStudy, Response, SessionSummary, SimulationReport, SyntheticMeasurement, SyntheticProcessOracle,
};

/// One additive term `coefficient * (x[input] + shift)^exponent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub input: usize,
    pub coefficient: f64,
    #[serde(default = "one")]
    pub exponent: f64,
    #[serde(default)]
    pub shift: f64,
}

fn one() -> f64 {
    1.0
}

/// Closed-form cost over a subset of the controllable inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub label: String,
    #[serde(default)]
    pub intercept: f64,
    pub terms: Vec<Term>,
}

impl ObjectiveSpec {
    pub fn validate(&self, controllable_dims: usize) -> Result<()> {
        if !self.intercept.is_finite() {
            return Err(Error::InvalidParameter("objective intercept must be finite".into()));
        }
        for t in &self.terms {
            if t.input >= controllable_dims {
                return Err(Error::InvalidParameter(format!(
                    "objective term refers to input {} but only {controllable_dims} controllable inputs exist",
                    t.input
                )));
            }
            if !(t.coefficient.is_finite() && t.exponent.is_finite() && t.shift.is_finite()) {
                return Err(Error::InvalidParameter("objective terms must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn formula(&self) -> String {
        let mut s = format!("{}", self.intercept);
        for t in &self.terms {
            let base = if t.shift == 0.0 { format!("x{}", t.input + 1) } else { format!("(x{} + {})", t.input + 1, t.shift) };
            let pow = if t.exponent == 1.0 { base } else { format!("{base}^{}", t.exponent) };
            s.push_str(&format!(" + {}*{pow}", t.coefficient));
        }
        s
    }
}

impl Objective for ObjectiveSpec {
    fn cost(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.intercept, |acc, t| acc + t.coefficient * (x[t.input] + t.shift).powf(t.exponent))
    }

    fn describe(&self) -> String {
        format!("{}: {}", self.label, self.formula())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedConstraint {
    pub name: String,
    pub spec: ConstraintSpec,
}

/// The status-dependent measurement, stored as the last input column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusConfig {
    pub name: String,
}

/// Initialization experiments given inline in the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitData {
    pub inputs: Vec<Vec<f64>>,
    pub measurements: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Grid over the controllable inputs.
    pub grid: GridSpec,
    #[serde(default)]
    pub status: Option<StatusConfig>,
    pub constraints: Vec<NamedConstraint>,
    pub objective: ObjectiveSpec,
    pub batch: BatchConfig,
    #[serde(default = "campaign_fit")]
    pub fit: FitConfig,
    #[serde(default)]
    pub init: Option<InitData>,
    /// Dataset CSV (`x1..xn,c1..cK`), resolved relative to the config file.
    #[serde(default)]
    pub init_csv: Option<std::path::PathBuf>,
    /// Also store the calibration experiment as a regular data point.
    #[serde(default = "yes")]
    pub append_baseline: bool,
}

fn yes() -> bool {
    true
}

/// Campaign default: measurement noise is learned with the other hyperparameters.
pub fn campaign_fit() -> FitConfig {
    let mut f = FitConfig { restarts: 3, max_iterations: 80, ..FitConfig::default() };
    f.settings.noise = NoiseMode::Learned { lower: 1e-6, upper: 1.0 };
    f
}

impl CampaignConfig {
    pub fn controllable_dims(&self) -> usize {
        self.grid.axes.len()
    }

    pub fn dims(&self) -> usize {
        self.controllable_dims() + usize::from(self.status.is_some())
    }

    pub fn specs(&self) -> Vec<ConstraintSpec> {
        self.constraints.iter().map(|c| c.spec.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.constraints.is_empty() {
            return Err(Error::InvalidParameter("a campaign needs at least one constraint".into()));
        }
        for c in &self.constraints {
            c.spec.validate()?;
        }
        self.objective.validate(self.controllable_dims())?;
        self.batch.validate()?;
        self.fit.validate()
    }

    /// Initialization dataset from the inline rows, the CSV file, or empty.
    pub fn initial_dataset(&self, base_dir: Option<&std::path::Path>) -> Result<Dataset> {
        let ds = match (&self.init, &self.init_csv) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter("give either inline init data or init_csv, not both".into()))
            }
            (Some(d), None) if d.inputs.is_empty() => Dataset::new(self.dims(), self.constraints.len())?,
            (Some(d), None) => Dataset::from_rows(d.inputs.clone(), d.measurements.clone())?,
            (None, Some(p)) => {
                let path = match base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Dataset::load_csv(path)?
            }
            (None, None) => Dataset::new(self.dims(), self.constraints.len())?,
        };
        if ds.dims() != self.dims() {
            return Err(Error::DimensionMismatch { expected: self.dims(), got: ds.dims() });
        }
        if ds.constraint_count() != self.constraints.len() {
            return Err(Error::MeasurementMismatch { expected: self.constraints.len(), got: ds.constraint_count() });
        }
        Ok(ds)
    }
}
