use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CampaignConfig;
use crate::acquisition::{dataset_feasibility, is_feasible, Incumbent};
use crate::batch::{check_termination, fit_models, propose_batch_with_models, BatchConfig, ProposedBatch};
use crate::calibration::{
    compute_offset, compute_offset_unchecked, fit_status_model, generate_candidates, SessionOffset, StatusModel,
};
use crate::candidates::{CandidatePool, CandidateSet};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpModel, InputScaling, KernelParams};

/// One state transition. The log starts with exactly one `Init`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Init {
        dataset: Dataset,
    },
    Calibrate {
        offset: SessionOffset,
        /// Constraint values measured in the baseline experiment, if any.
        baseline_constraints: Option<Vec<f64>>,
        appended: bool,
    },
    Suggest {
        pi: f64,
        batch_size: usize,
        batch: ProposedBatch,
    },
    Record {
        measurements: Vec<Vec<f64>>,
        /// Measured status values replacing the predicted ones.
        status_values: Option<Vec<f64>>,
        termination_recommended: bool,
    },
    Abandon {
        reason: Option<String>,
    },
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::Init { .. } => "init",
            Event::Calibrate { .. } => "calibrate",
            Event::Suggest { .. } => "suggest",
            Event::Record { .. } => "record",
            Event::Abandon { .. } => "abandon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: CampaignConfig,
    pub dataset: Dataset,
    pub offset: Option<SessionOffset>,
    pub pending: Option<ProposedBatch>,
    /// Current confidence threshold; suggest overrides persist.
    pub pi: f64,
    pub batch_size: usize,
    pub history: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub incumbent: Option<IncumbentSummary>,
    pub termination_recommended: bool,
    pub feasible_in_batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncumbentSummary {
    pub cost: f64,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignStatus {
    pub name: String,
    pub description: String,
    pub evaluations: usize,
    pub feasible: usize,
    pub feasible_fraction: f64,
    pub incumbent: Option<IncumbentSummary>,
    pub pending: usize,
    pub pi: f64,
    pub batch_size: usize,
    pub offset: Option<f64>,
    pub last_batch_fips: Option<Vec<f64>>,
    pub termination_recommended: bool,
    pub events: usize,
}

impl std::fmt::Display for CampaignStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "campaign {}", self.name)?;
        if !self.description.is_empty() {
            writeln!(f, "  {}", self.description)?;
        }
        writeln!(f, "  evaluations: {} ({} feasible, {:.1}%)", self.evaluations, self.feasible, 100.0 * self.feasible_fraction)?;
        match &self.incumbent {
            Some(i) => writeln!(f, "  incumbent: cost {} at {:?}", i.cost, i.input)?,
            None => writeln!(f, "  incumbent: none (no feasible evaluation yet)")?,
        }
        writeln!(f, "  pi: {}  batch size: {}", self.pi, self.batch_size)?;
        if let Some(d) = self.offset {
            writeln!(f, "  status offset: {d}")?;
        }
        if self.pending > 0 {
            writeln!(f, "  pending batch: {} experiments awaiting results", self.pending)?;
        }
        if let Some(fips) = &self.last_batch_fips {
            writeln!(f, "  last batch FIP: {fips:?}")?;
        }
        write!(
            f,
            "  termination: {}",
            if self.termination_recommended { "recommended (most of the last batch is unlikely to improve)" } else { "continue" }
        )
    }
}

impl SessionState {
    /// A fresh session holding the initialization experiments.
    pub fn init(config: CampaignConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.dims() != config.dims() {
            return Err(Error::DimensionMismatch { expected: config.dims(), got: dataset.dims() });
        }
        if dataset.constraint_count() != config.constraints.len() {
            return Err(Error::MeasurementMismatch { expected: config.constraints.len(), got: dataset.constraint_count() });
        }
        let mut s = Self {
            pi: config.batch.pi,
            batch_size: config.batch.batch_size,
            dataset: Dataset::new(config.dims(), config.constraints.len())?,
            config,
            offset: None,
            pending: None,
            history: Vec::new(),
        };
        s.apply(Event::Init { dataset })?;
        Ok(s)
    }

    /// The initialization experiments, used to train the status model.
    pub fn initial_dataset(&self) -> Option<&Dataset> {
        match self.history.first() {
            Some(Event::Init { dataset }) => Some(dataset),
            _ => None,
        }
    }

    fn status_model(&self) -> Result<StatusModel> {
        if self.config.status.is_none() {
            return Err(Error::Campaign("this campaign has no status measurement column".into()));
        }
        let init = self.initial_dataset().ok_or_else(|| Error::Campaign("session has no init event".into()))?;
        fit_status_model(init, self.config.controllable_dims(), &self.config.fit)
    }

    /// Stores the session offset from a baseline experiment repeated at an
    /// initialization setting.
    pub fn calibrate(
        &mut self,
        baseline_input: &[f64],
        measured: f64,
        baseline_constraints: Option<Vec<f64>>,
        allow_outside_init: bool,
    ) -> Result<&SessionOffset> {
        if self.pending.is_some() {
            return Err(Error::Campaign("a batch is pending; record or abandon it before calibrating".into()));
        }
        let model = self.status_model()?;
        let offset = if allow_outside_init {
            compute_offset_unchecked(&model, baseline_input, measured)?
        } else {
            compute_offset(&model, baseline_input, measured)?
        };
        if let Some(c) = &baseline_constraints {
            if c.len() != self.config.constraints.len() {
                return Err(Error::MeasurementMismatch { expected: self.config.constraints.len(), got: c.len() });
            }
        }
        let appended = self.config.append_baseline && baseline_constraints.is_some() && {
            let mut x = baseline_input.to_vec();
            x.push(measured);
            !self.dataset.contains(&x)
        };
        self.apply(Event::Calibrate { offset, baseline_constraints, appended })?;
        Ok(self.offset.as_ref().expect("offset just stored"))
    }

    /// Current candidate set: the controllable grid, expanded with the
    /// calibrated status prediction when a status column exists, minus
    /// settings already evaluated.
    pub fn candidates(&self) -> Result<CandidateSet> {
        if self.config.status.is_some() {
            let offset = self.offset.as_ref().ok_or_else(|| {
                Error::Campaign("status modeling is enabled: run calibrate at the start of the session".into())
            })?;
            let model = self.status_model()?;
            generate_candidates(&self.config.grid, &model, offset, &self.dataset)
        } else {
            let points: Vec<Vec<f64>> =
                self.config.grid.points()?.into_iter().filter(|p| !self.dataset.contains(p)).collect();
            CandidateSet::new(points)
        }
    }

    fn models(&self) -> Result<Vec<GpModel>> {
        if self.dataset.len() >= 2 {
            return fit_models(&self.dataset, &self.config.fit, None);
        }
        // too little data to fit: condition on default hyperparameters
        let dims = self.dataset.dims();
        let scaling = match &self.config.fit.settings.input_bounds {
            Some(b) => InputScaling::from_bounds(b)?,
            None => {
                let mut b: Vec<(f64, f64)> = self.config.grid.axes.iter().map(|a| (a.lower, a.upper)).collect();
                if self.config.status.is_some() {
                    let v = self.dataset.inputs().first().map_or(0.0, |x| x[dims - 1]);
                    b.push((v - 1.0, v + 1.0));
                }
                InputScaling::from_bounds(&b)?
            }
        };
        let params = KernelParams::isotropic(dims, 0.25, 1.0, 1e-4);
        (0..self.dataset.constraint_count())
            .map(|k| GpModel::condition(&self.dataset, k, params.clone(), scaling.clone(), &self.config.fit.settings))
            .collect()
    }

    /// Proposes the next batch and stores it as pending. Overrides of the
    /// batch size and π persist for later suggestions.
    pub fn suggest(&mut self, batch_size: Option<usize>, pi: Option<f64>) -> Result<&ProposedBatch> {
        if self.pending.is_some() {
            return Err(Error::Campaign(
                "a batch is already pending; record its results or abandon it first".into(),
            ));
        }
        let pi = pi.unwrap_or(self.pi);
        let batch_size = batch_size.unwrap_or(self.batch_size);
        let cfg = BatchConfig { pi, batch_size, ..self.config.batch.clone() };
        cfg.validate()?;
        if pi != self.pi {
            tracing::info!(from = self.pi, to = pi, "confidence threshold changed");
        }
        let objective = &self.config.objective;
        let pool = CandidatePool::new(self.candidates()?, objective)?;
        if pool.is_exhausted() {
            return Err(Error::EmptyCandidates);
        }
        let models = self.models()?;
        let specs = self.config.specs();
        let batch = propose_batch_with_models(&self.dataset, &pool, &specs, objective, &cfg, &self.config.fit, &models)?;
        self.apply(Event::Suggest { pi, batch_size, batch })?;
        Ok(self.pending.as_ref().expect("batch just stored"))
    }

    /// Adds measured results for the pending batch.
    pub fn record(&mut self, measurements: Vec<Vec<f64>>, status_values: Option<Vec<f64>>) -> Result<RecordOutcome> {
        let pending = self.pending.as_ref().ok_or_else(|| Error::Campaign("no pending batch to record".into()))?;
        if measurements.len() != pending.len() {
            return Err(Error::MeasurementMismatch { expected: pending.len(), got: measurements.len() });
        }
        let k = self.config.constraints.len();
        if let Some(m) = measurements.iter().find(|m| m.len() != k) {
            return Err(Error::MeasurementMismatch { expected: k, got: m.len() });
        }
        if measurements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("measurements must be finite".into()));
        }
        if let Some(v) = &status_values {
            if self.config.status.is_none() {
                return Err(Error::Campaign("this campaign has no status measurement column".into()));
            }
            if v.len() != pending.len() {
                return Err(Error::MeasurementMismatch { expected: pending.len(), got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset("status values must be finite".into()));
            }
        }
        let termination_recommended = check_termination(pending, self.config.batch.termination_threshold);
        let specs = self.config.specs();
        let feasible_in_batch = measurements.iter().filter(|m| is_feasible(m, &specs)).count();
        self.apply(Event::Record { measurements, status_values, termination_recommended })?;
        Ok(RecordOutcome { incumbent: self.incumbent(), termination_recommended, feasible_in_batch })
    }

    /// Discards the pending batch; the event stays in the history.
    pub fn abandon(&mut self, reason: Option<String>) -> Result<()> {
        if self.pending.is_none() {
            return Err(Error::Campaign("no pending batch to abandon".into()));
        }
        self.apply(Event::Abandon { reason })
    }

    pub fn incumbent(&self) -> Option<IncumbentSummary> {
        let specs = self.config.specs();
        let inc = Incumbent::compute(&self.dataset, &specs, &self.config.objective, f64::NEG_INFINITY);
        inc.best_feasible_input.map(|input| IncumbentSummary { cost: inc.best_feasible_cost, input })
    }

    /// Read-only summary.
    pub fn status(&self) -> CampaignStatus {
        let specs = self.config.specs();
        let feasible = dataset_feasibility(&self.dataset, &specs).iter().filter(|&&f| f).count();
        let last = self.last_recorded_batch();
        CampaignStatus {
            name: self.config.name.clone(),
            description: self.config.description.clone(),
            evaluations: self.dataset.len(),
            feasible,
            feasible_fraction: if self.dataset.is_empty() { 0.0 } else { feasible as f64 / self.dataset.len() as f64 },
            incumbent: self.incumbent(),
            pending: self.pending.as_ref().map_or(0, ProposedBatch::len),
            pi: self.pi,
            batch_size: self.batch_size,
            offset: self.offset.as_ref().map(|o| o.delta),
            last_batch_fips: last.map(|b| b.selection_fips.clone()),
            termination_recommended: last
                .is_some_and(|b| check_termination(b, self.config.batch.termination_threshold)),
            events: self.history.len(),
        }
    }

    fn last_recorded_batch(&self) -> Option<&ProposedBatch> {
        let mut pending: Option<&ProposedBatch> = None;
        let mut last = None;
        for e in &self.history {
            match e {
                Event::Suggest { batch, .. } => pending = Some(batch),
                Event::Record { .. } => last = pending.take(),
                Event::Abandon { .. } => pending = None,
                _ => {}
            }
        }
        last
    }

    /// Applies one event and appends it to the history.
    fn apply(&mut self, event: Event) -> Result<()> {
        match &event {
            Event::Init { dataset } => {
                if !self.history.is_empty() {
                    return Err(Error::Campaign("init must be the first event".into()));
                }
                self.dataset = dataset.clone();
            }
            Event::Calibrate { offset, baseline_constraints, appended } => {
                if *appended {
                    let c = baseline_constraints.as_ref().ok_or_else(|| {
                        Error::Campaign("appended calibration without constraint measurements".into())
                    })?;
                    let mut x = offset.baseline_input.clone();
                    x.push(offset.baseline_measured);
                    self.dataset.push(x, c)?;
                }
                self.offset = Some(offset.clone());
            }
            Event::Suggest { pi, batch_size, batch } => {
                if self.pending.is_some() {
                    return Err(Error::Campaign("two suggestions without a record or abandon in between".into()));
                }
                self.pi = *pi;
                self.batch_size = *batch_size;
                self.pending = Some(batch.clone());
            }
            Event::Record { measurements, status_values, .. } => {
                let batch = self.pending.take().ok_or_else(|| Error::Campaign("record without a pending batch".into()))?;
                let mut next = self.dataset.clone();
                for (i, (x, m)) in batch.candidates.iter().zip(measurements).enumerate() {
                    let mut x = x.clone();
                    if let (Some(v), Some(last)) = (status_values, x.last_mut()) {
                        *last = v[i];
                    }
                    next.push(x, m)?;
                }
                self.dataset = next;
            }
            Event::Abandon { .. } => {
                if self.pending.take().is_none() {
                    return Err(Error::Campaign("abandon without a pending batch".into()));
                }
            }
        }
        tracing::debug!(event = event.name(), "session event");
        self.history.push(event);
        Ok(())
    }
}

/// Rebuilds a session by applying `history` to a blank state for `config`.
pub fn replay(config: &CampaignConfig, history: &[Event]) -> Result<SessionState> {
    let mut s = SessionState {
        pi: config.batch.pi,
        batch_size: config.batch.batch_size,
        dataset: Dataset::new(config.dims(), config.constraints.len())?,
        config: config.clone(),
        offset: None,
        pending: None,
        history: Vec::new(),
    };
    for e in history {
        s.apply(e.clone())?;
    }
    Ok(s)
}

pub fn load_session(path: &Path) -> Result<SessionState> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes the state next to `path` and syncs it, without replacing `path`.
pub fn write_temp(path: &Path, state: &SessionState) -> Result<PathBuf> {
    let tmp = temp_path(path);
    let mut f = File::create(&tmp)?;
    serde_json::to_writer_pretty(&mut f, state)?;
    f.write_all(b"\n")?;
    f.sync_all()?;
    Ok(tmp)
}

/// Atomically replaces `path` with a previously written temp file.
pub fn commit_temp(tmp: &Path, path: &Path) -> Result<()> {
    fs::rename(tmp, path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // persist the rename itself where the platform allows it
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub fn save_session(path: &Path, state: &SessionState) -> Result<()> {
    let tmp = write_temp(path, state)?;
    commit_temp(&tmp, path)
}

/// Exclusive writer lock, released on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn acquire_lock(session: &Path) -> Result<SessionLock> {
    let mut name = session.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    let path = session.with_file_name(name);
    match OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(SessionLock { path })
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Campaign(format!(
            "session is locked by another command ({}); remove the lock file if no command is running",
            path.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Loads the session under the writer lock, applies `f`, and saves the
/// result atomically when `f` succeeds.
pub fn with_session<T>(path: &Path, f: impl FnOnce(&mut SessionState) -> Result<T>) -> Result<T> {
    let _lock = acquire_lock(path)?;
    let mut state = load_session(path)?;
    let out = f(&mut state)?;
    save_session(path, &state)?;
    Ok(out)
}
