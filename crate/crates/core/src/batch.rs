//! Fixed-size batch proposals built from posterior-mean fantasies.
//!
//! A batch is assembled one candidate at a time: after each selection the
//! constraint models are re-conditioned on a virtual copy of the data that
//! includes the selected point with its predicted constraint means. Fantasies
//! never reach the real dataset; measured values replace them once the batch
//! has been evaluated.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    dataset_feasibility, feasibility_probability, score_candidates, AcquisitionRule, Branch, ConstraintSpec, Incumbent, ScoreMode,
};
use crate::candidates::{CandidatePool, Objective};
use crate::error::{Error, Result};
use crate::gp::{fit, Dataset, FitConfig, GpModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    #[default]
    Switching,
    ConstrainedEi,
}

impl AcquisitionKind {
    /// Short name: `alg1` for the switching rule, `eic` for the baseline.
    pub fn label(self) -> &'static str {
        match self {
            AcquisitionKind::Switching => "alg1",
            AcquisitionKind::ConstrainedEi => "eic",
        }
    }
}

impl std::str::FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alg1" | "switching" => Ok(AcquisitionKind::Switching),
            "eic" | "constrained_ei" => Ok(AcquisitionKind::ConstrainedEi),
            other => Err(Error::InvalidParameter(format!("unknown acquisition {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub pi: f64,
    pub termination_threshold: f64,
    #[serde(default = "default_max_batches")]
    pub max_batches: usize,
    #[serde(default)]
    pub acquisition: AcquisitionKind,
    /// Refit hyperparameters on every fantasy step instead of re-conditioning.
    #[serde(default)]
    pub refit_in_fantasy: bool,
}

fn default_max_batches() -> usize {
    50
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            pi: 0.6,
            termination_threshold: 0.05,
            max_batches: default_max_batches(),
            acquisition: AcquisitionKind::Switching,
            refit_in_fantasy: false,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidParameter(format!("pi must lie in [0, 1], got {}", self.pi)));
        }
        if !(0.0..=1.0).contains(&self.termination_threshold) {
            return Err(Error::InvalidParameter(format!(
                "termination threshold must lie in [0, 1], got {}",
                self.termination_threshold
            )));
        }
        Ok(())
    }

    pub fn rule(&self) -> AcquisitionRule {
        match self.acquisition {
            AcquisitionKind::Switching => AcquisitionRule::Switching { pi: self.pi },
            AcquisitionKind::ConstrainedEi => AcquisitionRule::ConstrainedEi,
        }
    }
}

/// Diagnostics recorded when a candidate enters a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub inner_index: usize,
    pub candidate_id: usize,
    pub input: Vec<f64>,
    pub cost: f64,
    pub improvement: f64,
    pub feasibility: f64,
    pub alpha_fip: f64,
    /// Value of the acquisition the branch maximized.
    pub alpha: f64,
    pub branch: Branch,
    pub fantasy_means: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposedBatch {
    pub candidate_ids: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
    pub selection_fips: Vec<f64>,
    pub selection_branches: Vec<Branch>,
    pub records: Vec<SelectionRecord>,
    /// Set when the candidate set ran out before the batch was full.
    pub exhausted: bool,
}

impl ProposedBatch {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn push(&mut self, record: SelectionRecord) {
        self.candidate_ids.push(record.candidate_id);
        self.candidates.push(record.input.clone());
        self.selection_fips.push(record.alpha_fip);
        self.selection_branches.push(record.branch);
        self.records.push(record);
    }
}

/// The real dataset extended with fantasy observations at the tail.
#[derive(Clone, Debug)]
pub struct VirtualDataset {
    dataset: Dataset,
    real_len: usize,
}

impl VirtualDataset {
    pub fn new(real: &Dataset) -> Self {
        let dataset = real.clone().with_duplicates(true);
        Self { real_len: dataset.len(), dataset }
    }

    pub fn push_fantasy(&mut self, x: Vec<f64>, means: &[f64]) -> Result<()> {
        self.dataset.push(x, means)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn fantasy_count(&self) -> usize {
        self.dataset.len() - self.real_len
    }

    /// The real dataset with every fantasy dropped.
    pub fn real(&self) -> Dataset {
        let mut ds = self.dataset.clone();
        ds.truncate(self.real_len);
        ds
    }
}

/// Fits one model per constraint, warm-starting from `previous` when given.
pub fn fit_models(dataset: &Dataset, config: &FitConfig, previous: Option<&[GpModel]>) -> Result<Vec<GpModel>> {
    (0..dataset.constraint_count())
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            if let Some(prev) = previous.and_then(|p| p.get(k)) {
                cfg.warm_start = Some(prev.params().clone());
            }
            fit(dataset, k, &cfg)
        })
        .collect()
}

/// Fits models on the real data and proposes a batch.
pub fn propose_batch(
    dataset: &Dataset,
    pool: &CandidatePool,
    specs: &[ConstraintSpec],
    objective: &dyn Objective,
    config: &BatchConfig,
    fit_config: &FitConfig,
) -> Result<ProposedBatch> {
    let models = fit_models(dataset, fit_config, None)?;
    propose_batch_with_models(dataset, pool, specs, objective, config, fit_config, &models)
}

/// Proposes a batch starting from models already fitted on `dataset`.
///
/// `pool` is not modified; callers remove the selected ids once the batch is
/// accepted.
pub fn propose_batch_with_models(
    dataset: &Dataset,
    pool: &CandidatePool,
    specs: &[ConstraintSpec],
    objective: &dyn Objective,
    config: &BatchConfig,
    fit_config: &FitConfig,
    models: &[GpModel],
) -> Result<ProposedBatch> {
    config.validate()?;
    if pool.is_exhausted() {
        return Err(Error::EmptyCandidates);
    }
    if specs.len() != dataset.constraint_count() || models.len() != specs.len() {
        return Err(Error::MeasurementMismatch { expected: dataset.constraint_count(), got: specs.len() });
    }
    let rule = config.rule();
    let incumbent = Incumbent::compute(dataset, specs, objective, pool.costs().max());
    let feasibility = dataset_feasibility(dataset, specs);

    let mut virt = VirtualDataset::new(dataset);
    let mut local = pool.clone();
    let mut current: Vec<GpModel> = models.to_vec();
    let mut batch = ProposedBatch::default();

    for inner in 0..config.batch_size {
        if local.is_exhausted() {
            batch.exhausted = true;
            tracing::warn!(selected = inner, requested = config.batch_size, "candidate set exhausted");
            break;
        }
        if inner > 0 {
            current = if config.refit_in_fantasy {
                fit_models(virt.dataset(), fit_config, Some(&current))?
            } else {
                current.iter().enumerate().map(|(k, m)| m.recondition(virt.dataset(), k)).collect::<Result<_>>()?
            };
        }
        let scores = score_candidates(&current, specs, &local, &incumbent, rule.pi(), ScoreMode::ImprovingOnly)?;
        let sel = rule.select(&scores, &feasibility)?;
        let p = sel.position;
        let x = local.set().point(sel.candidate_id).to_vec();
        let predictions = current.iter().map(|m| m.predict(&x)).collect::<Result<Vec<_>>>()?;
        let fantasy_means: Vec<f64> = predictions.iter().map(|pred| pred.mean).collect();
        // non-improving candidates are scored without their feasibility
        let fp = if scores.feasibility[p].is_nan() {
            feasibility_probability(&predictions, specs)
        } else {
            scores.feasibility[p]
        };
        let alpha = match sel.branch {
            Branch::HighConfidence => scores.alpha_hfi[p],
            Branch::ConstrainedEi if feasibility.iter().any(|&f| f) => scores.alpha_eic[p],
            _ => scores.alpha_fip[p],
        };
        batch.push(SelectionRecord {
            inner_index: inner,
            candidate_id: sel.candidate_id,
            input: x.clone(),
            cost: scores.cost[p],
            improvement: scores.improvement[p],
            feasibility: fp,
            alpha_fip: scores.alpha_fip[p],
            alpha,
            branch: sel.branch,
            fantasy_means: fantasy_means.clone(),
        });
        local.remove(&[sel.candidate_id]);
        virt.push_fantasy(x, &fantasy_means)?;
    }
    Ok(batch)
}

/// True when at least half of the batch (rounded up) has `alpha_fip < epsilon`.
pub fn check_termination(batch: &ProposedBatch, epsilon: f64) -> bool {
    if batch.is_empty() {
        return false;
    }
    let low = batch.selection_fips.iter().filter(|&&f| f < epsilon).count();
    low >= batch.len().div_ceil(2)
}

/// Appends measured results for every batch candidate to the real dataset.
pub fn incorporate_results(dataset: &Dataset, batch: &ProposedBatch, measurements: &[Vec<f64>]) -> Result<Dataset> {
    if measurements.len() != batch.len() {
        return Err(Error::MeasurementMismatch { expected: batch.len(), got: measurements.len() });
    }
    let mut out = dataset.clone();
    for (x, m) in batch.candidates.iter().zip(measurements) {
        out.push(x.clone(), m)?;
    }
    Ok(out)
}

/// Evaluates candidates' true constraints.
pub trait Oracle {
    fn evaluate(&mut self, x: &[f64]) -> Vec<f64>;
}

impl<F> Oracle for F
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    fn evaluate(&mut self, x: &[f64]) -> Vec<f64> {
        self(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkflowStatus {
    /// The termination rule fired on the last proposed batch.
    Terminated,
    MaxBatches,
    CandidatesExhausted,
}

/// One outer iteration of the workflow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchTrace {
    pub batch_index: usize,
    pub batch: ProposedBatch,
    /// Absent for the batch that triggered termination, which is never run.
    pub measurements: Option<Vec<Vec<f64>>>,
    pub incumbent_cost: f64,
    pub incumbent_feasible: bool,
}

#[derive(Clone, Debug)]
pub struct WorkflowOutcome {
    pub dataset: Dataset,
    pub status: WorkflowStatus,
    pub trace: Vec<BatchTrace>,
    /// Feasible cost minimizer over the evaluated points, if any exists.
    pub minimizer: Option<(Vec<f64>, f64)>,
}

impl WorkflowOutcome {
    /// Writes one JSON record per selected candidate.
    pub fn write_trace_jsonl<W: Write>(&self, mut writer: W) -> Result<()> {
        for bt in &self.trace {
            for (i, r) in bt.batch.records.iter().enumerate() {
                let record = serde_json::json!({
                    "batch_index": bt.batch_index,
                    "inner_index": r.inner_index,
                    "candidate": r.input,
                    "S": r.cost,
                    "I": r.improvement,
                    "FP": r.feasibility,
                    "alpha": r.alpha,
                    "branch": r.branch,
                    "fantasy_means": r.fantasy_means,
                    "measured_values": bt.measurements.as_ref().map(|m| &m[i]),
                });
                serde_json::to_writer(&mut writer, &record)?;
                writer.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Runs propose, evaluate and incorporate until the termination rule fires,
/// the candidate set is exhausted, or `config.max_batches` batches were run.
///
/// Hyperparameters are refit once per outer iteration, on real data only.
pub fn run_to_termination(
    dataset: &Dataset,
    pool: &mut CandidatePool,
    specs: &[ConstraintSpec],
    objective: &dyn Objective,
    config: &BatchConfig,
    fit_config: &FitConfig,
    oracle: &mut dyn Oracle,
) -> Result<WorkflowOutcome> {
    config.validate()?;
    let mut dataset = dataset.clone();
    let mut trace = Vec::new();
    let mut models: Option<Vec<GpModel>> = None;
    let mut status = WorkflowStatus::MaxBatches;

    for batch_index in 0..config.max_batches {
        if pool.is_exhausted() {
            status = WorkflowStatus::CandidatesExhausted;
            break;
        }
        let fitted = fit_models(&dataset, fit_config, models.as_deref())?;
        let batch = propose_batch_with_models(&dataset, pool, specs, objective, config, fit_config, &fitted)?;
        models = Some(fitted);
        pool.remove(&batch.candidate_ids);

        if check_termination(&batch, config.termination_threshold) {
            let inc = Incumbent::compute(&dataset, specs, objective, pool.costs().max());
            trace.push(BatchTrace {
                batch_index,
                batch,
                measurements: None,
                incumbent_cost: inc.best_feasible_cost,
                incumbent_feasible: inc.has_feasible(),
            });
            status = WorkflowStatus::Terminated;
            break;
        }
        let measurements: Vec<Vec<f64>> = batch.candidates.iter().map(|x| oracle.evaluate(x)).collect();
        dataset = incorporate_results(&dataset, &batch, &measurements)?;
        let inc = Incumbent::compute(&dataset, specs, objective, pool.costs().max());
        let exhausted = batch.exhausted;
        trace.push(BatchTrace {
            batch_index,
            batch,
            measurements: Some(measurements),
            incumbent_cost: inc.best_feasible_cost,
            incumbent_feasible: inc.has_feasible(),
        });
        if exhausted {
            status = WorkflowStatus::CandidatesExhausted;
            break;
        }
    }

    let inc = Incumbent::compute(&dataset, specs, objective, pool.costs().max());
    let minimizer = inc.best_feasible_input.clone().map(|x| (x, inc.best_feasible_cost));
    Ok(WorkflowOutcome { dataset, status, trace, minimizer })
}
