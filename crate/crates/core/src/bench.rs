//! Monte Carlo harness for the benchmark problems.
//!
//! A repetition draws a few random grid points, then runs sequential
//! (batch size one) optimization until the known grid optimum is reached or
//! the iteration budget runs out. Repetitions share initializations across
//! acquisition rules and π values, and in noisy mode also share the noise
//! realization, so paired comparisons see the same randomness.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{dataset_feasibility, is_feasible, score_candidates, Incumbent, ScoreMode};
use crate::batch::{fit_models, propose_batch_with_models, AcquisitionKind, BatchConfig};
use crate::candidates::CandidatePool;
use crate::error::{Error, Result};
use crate::gp::{Dataset, FitConfig, GpModel, NoiseMode};
use crate::problems::{
    find_grid_optimum, make_grid, mix, BenchmarkProblem, NoiseConfig, NoiseStream, OptimizerOracle, ProblemName,
};

const INIT_TAG: u64 = 0x1417;
const FIT_TAG: u64 = 0xF17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemName,
    pub acquisition: AcquisitionKind,
    pub pi: f64,
    pub tau: f64,
    pub max_iterations: usize,
    pub init_count: usize,
    /// Repetitions in noiseless mode.
    pub repetitions: usize,
    /// Noisy mode runs `initializations * noise_realizations` repetitions.
    pub initializations: usize,
    pub noise_realizations: usize,
    pub seed: u64,
    pub grid_count: usize,
    /// Hyperparameter search; bounds and noise handling are set per problem.
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn new(problem: ProblemName, acquisition: AcquisitionKind) -> Self {
        Self {
            problem,
            acquisition,
            pi: 0.6,
            tau: 0.0,
            max_iterations: 100,
            init_count: 2,
            repetitions: 100,
            initializations: 20,
            noise_realizations: 5,
            seed: 0,
            grid_count: 20_000,
            fit: default_fit(),
        }
    }

    pub fn is_noisy(&self) -> bool {
        self.tau > 0.0
    }

    pub fn total_repetitions(&self) -> usize {
        if self.is_noisy() {
            self.initializations * self.noise_realizations
        } else {
            self.repetitions
        }
    }

    /// Initialization index used by repetition `r`.
    pub fn init_index(&self, r: usize) -> usize {
        if self.is_noisy() {
            r / self.noise_realizations.max(1)
        } else {
            r
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_repetitions() == 0 {
            return Err(Error::InvalidParameter("at least one repetition is required".into()));
        }
        if self.init_count == 0 {
            return Err(Error::InvalidParameter("init_count must be at least 1".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidParameter(format!("pi must lie in [0, 1], got {}", self.pi)));
        }
        self.fit.validate()
    }

    fn label(&self) -> String {
        match self.acquisition {
            AcquisitionKind::Switching => format!("alg1(pi={})", self.pi),
            AcquisitionKind::ConstrainedEi => "eic".to_string(),
        }
    }

    fn fit_for(&self, problem: &BenchmarkProblem, repetition: usize) -> FitConfig {
        let mut fit = self.fit.clone();
        fit.settings.input_bounds = Some(problem.bounds.clone());
        fit.settings.noise =
            if self.is_noisy() { NoiseMode::Fixed { variance: self.tau * self.tau } } else { NoiseMode::Noiseless };
        fit.seed = mix(&[self.seed, FIT_TAG, repetition as u64]);
        fit
    }
}

/// Hyperparameter search used by the harness: a warm start from the previous
/// iteration plus a couple of fresh starts.
pub fn default_fit() -> FitConfig {
    FitConfig { restarts: 3, max_iterations: 60, ..FitConfig::default() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    OptimumFound,
    MaxIterations,
    CandidatesExhausted,
    /// A model could not be fitted; the repetition is censored.
    Failed,
}

/// One evaluated point. Initialization points have iteration 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub candidate: usize,
    pub x: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    /// Measured (possibly noisy) values respect every constraint.
    pub feasible: bool,
    pub true_feasible: bool,
    pub branch: Option<String>,
    pub improvement: Option<f64>,
    pub feasibility: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub repetition: usize,
    pub init_index: usize,
    pub entries: Vec<TraceEntry>,
    pub stop: StopReason,
    /// Optimization evaluations until the stopping rule fired; censored at
    /// `max_iterations`.
    pub required_iterations: usize,
    pub error: Option<String>,
}

impl RunTrace {
    pub fn optimization_entries(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.iteration > 0)
    }

    /// Best measured-feasible objective after each evaluation; `None` until
    /// the first feasible sample.
    pub fn convergence(&self) -> Vec<Option<f64>> {
        let mut best: Option<f64> = None;
        self.entries
            .iter()
            .map(|e| {
                if e.feasible {
                    best = Some(best.map_or(e.objective, |b| b.min(e.objective)));
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSummary {
    pub repetition: usize,
    pub required_iterations: usize,
    pub stop: StopReason,
    pub optimization_samples: usize,
    pub feasible_optimization_samples: usize,
    pub feasible_init_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub label: String,
    pub problem: ProblemName,
    pub acquisition: AcquisitionKind,
    pub pi: f64,
    pub tau: f64,
    pub repetitions: usize,
    pub mean_required_iterations: f64,
    /// Pooled over optimization samples only.
    pub feasible_fraction: f64,
    /// Pooled over every evaluated sample, initialization included.
    pub feasible_fraction_with_init: f64,
    pub optimum_found: usize,
    pub failed: usize,
    pub per_repetition: Vec<RepetitionSummary>,
    pub convergence: Vec<Vec<Option<f64>>>,
}

impl AggregateMetrics {
    pub fn from_traces(config: &RunConfig, traces: &[RunTrace]) -> Self {
        let per_repetition: Vec<RepetitionSummary> = traces
            .iter()
            .map(|t| {
                let opt: Vec<&TraceEntry> = t.optimization_entries().collect();
                RepetitionSummary {
                    repetition: t.repetition,
                    required_iterations: t.required_iterations,
                    stop: t.stop,
                    optimization_samples: opt.len(),
                    feasible_optimization_samples: opt.iter().filter(|e| e.feasible).count(),
                    feasible_init_samples: t.entries.iter().filter(|e| e.iteration == 0 && e.feasible).count(),
                }
            })
            .collect();
        let n = traces.len().max(1) as f64;
        let samples: usize = per_repetition.iter().map(|s| s.optimization_samples).sum();
        let feasible: usize = per_repetition.iter().map(|s| s.feasible_optimization_samples).sum();
        let all: usize = traces.iter().map(|t| t.entries.len()).sum();
        let feasible_all: usize = feasible + per_repetition.iter().map(|s| s.feasible_init_samples).sum::<usize>();
        Self {
            label: config.label(),
            problem: config.problem,
            acquisition: config.acquisition,
            pi: config.pi,
            tau: config.tau,
            repetitions: traces.len(),
            mean_required_iterations: per_repetition.iter().map(|s| s.required_iterations as f64).sum::<f64>() / n,
            feasible_fraction: ratio(feasible, samples),
            feasible_fraction_with_init: ratio(feasible_all, all),
            optimum_found: traces.iter().filter(|t| t.stop == StopReason::OptimumFound).count(),
            failed: traces.iter().filter(|t| t.stop == StopReason::Failed).count(),
            per_repetition,
            convergence: traces.iter().map(RunTrace::convergence).collect(),
        }
    }

    /// Mean over repetitions of the best feasible objective at each step,
    /// carrying finished repetitions forward. `None` while no repetition
    /// has a feasible sample.
    pub fn mean_convergence(&self) -> Vec<Option<f64>> {
        let len = self.convergence.iter().map(Vec::len).max().unwrap_or(0);
        (0..len)
            .map(|i| {
                let vals: Vec<f64> =
                    self.convergence.iter().filter_map(|s| s.get(i).or(s.last()).copied().flatten()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Problem, candidate grid and optimum, shared by every run on one problem.
#[derive(Clone, Debug)]
pub struct BenchContext {
    pub problem: BenchmarkProblem,
    pub pool: CandidatePool,
    pub oracle: OptimizerOracle,
}

impl BenchContext {
    pub fn new(problem: ProblemName, grid_count: usize) -> Result<Self> {
        let problem = BenchmarkProblem::new(problem);
        let grid = make_grid(&problem.bounds, grid_count)?;
        let oracle = find_grid_optimum(&problem, &grid)?;
        let pool = CandidatePool::new(grid, &problem)?;
        Ok(Self { problem, pool, oracle })
    }

    /// Whether `x` is feasible with the optimal grid objective. Grids over
    /// `x1 + x2` hold several points of equal cost, and any of them counts
    /// as the best candidate.
    pub fn ties_optimum(&self, x: &[f64]) -> bool {
        let f = self.problem.objective_value(x);
        let best = self.oracle.objective;
        (f - best).abs() <= 1e-12 * best.abs().max(1.0) && self.problem.is_feasible(x)
    }

    /// Grid indices of the initialization samples for `init_index`; the same
    /// for every acquisition rule and π.
    pub fn initial_indices(&self, seed: u64, init_index: usize, count: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, INIT_TAG, self.problem.name.id(), init_index as u64]));
        let n = self.pool.set().len();
        rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec()
    }
}

/// Runs repetition `repetition` of `config`.
pub fn run_single(config: &RunConfig, repetition: usize) -> Result<RunTrace> {
    config.validate()?;
    let ctx = BenchContext::new(config.problem, config.grid_count)?;
    Ok(run_with_context(&ctx, config, repetition))
}

/// Runs one repetition against a prepared context. Model failures end the
/// repetition with [`StopReason::Failed`] instead of an error.
pub fn run_with_context(ctx: &BenchContext, config: &RunConfig, repetition: usize) -> RunTrace {
    let problem = &ctx.problem;
    let init_index = config.init_index(repetition);
    let mut trace = RunTrace {
        repetition,
        init_index,
        entries: Vec::new(),
        stop: StopReason::MaxIterations,
        required_iterations: config.max_iterations,
        error: None,
    };
    let mut noise = NoiseStream::new(NoiseConfig { tau: config.tau, seed: config.seed }, problem.name, repetition as u64);
    let mut measure = |x: &[f64]| -> Vec<f64> {
        let c = problem.constraint_values(x);
        if config.is_noisy() {
            let e = noise.next_draws(c.len());
            c.iter().zip(e).map(|(v, e)| v + e).collect()
        } else {
            c
        }
    };
    let reached = |id: usize, x: &[f64]| {
        if config.is_noisy() {
            ctx.oracle.within_radius(x) && problem.is_feasible(x)
        } else {
            id == ctx.oracle.index || ctx.ties_optimum(x)
        }
    };

    let mut dataset = match Dataset::new(problem.dims(), problem.constraint_count()) {
        Ok(d) => d,
        Err(e) => return failed(trace, e),
    };
    let mut pool = ctx.pool.clone();
    let init = ctx.initial_indices(config.seed, init_index, config.init_count);
    let mut found = false;
    for &id in &init {
        let x = pool.set().point(id).to_vec();
        let c = measure(&x);
        trace.entries.push(entry(problem, 0, id, &x, &c, None));
        if let Err(e) = dataset.push(x.clone(), &c) {
            return failed(trace, e);
        }
        found |= reached(id, &x);
    }
    pool.remove(&init);
    if found {
        trace.stop = StopReason::OptimumFound;
        trace.required_iterations = 0;
        return trace;
    }

    let fit = config.fit_for(problem, repetition);
    let batch = BatchConfig { batch_size: 1, pi: config.pi, acquisition: config.acquisition, ..BatchConfig::default() };
    let mut models: Option<Vec<GpModel>> = None;
    for it in 1..=config.max_iterations {
        if pool.is_exhausted() {
            trace.stop = StopReason::CandidatesExhausted;
            return trace;
        }
        let step = fit_models(&dataset, &fit, models.as_deref()).and_then(|m| {
            let b = propose_batch_with_models(&dataset, &pool, &problem.specs, problem, &batch, &fit, &m)?;
            Ok((m, b))
        });
        let (fitted, proposed) = match step {
            Ok(v) => v,
            Err(e) => return failed(trace, e),
        };
        models = Some(fitted);
        let rec = &proposed.records[0];
        let c = measure(&rec.input);
        trace.entries.push(entry(problem, it, rec.candidate_id, &rec.input, &c, Some(rec)));
        if let Err(e) = dataset.push(rec.input.clone(), &c) {
            return failed(trace, e);
        }
        pool.remove(&[rec.candidate_id]);
        if reached(rec.candidate_id, &rec.input) {
            trace.stop = StopReason::OptimumFound;
            trace.required_iterations = it;
            return trace;
        }
    }
    trace
}

fn entry(
    problem: &BenchmarkProblem,
    iteration: usize,
    candidate: usize,
    x: &[f64],
    c: &[f64],
    rec: Option<&crate::batch::SelectionRecord>,
) -> TraceEntry {
    TraceEntry {
        iteration,
        candidate,
        x: x.to_vec(),
        objective: problem.objective_value(x),
        constraints: c.to_vec(),
        feasible: is_feasible(c, &problem.specs),
        true_feasible: problem.is_feasible(x),
        branch: rec.map(|r| r.branch.label().to_string()),
        improvement: rec.map(|r| r.improvement),
        feasibility: rec.map(|r| r.feasibility),
        alpha: rec.map(|r| r.alpha),
    }
}

fn failed(mut trace: RunTrace, e: Error) -> RunTrace {
    tracing::warn!(repetition = trace.repetition, error = %e, "repetition aborted");
    trace.stop = StopReason::Failed;
    trace.error = Some(e.to_string());
    trace
}

/// Runs every repetition of `config` in parallel and aggregates in order.
pub fn run_monte_carlo(config: &RunConfig) -> Result<(AggregateMetrics, Vec<RunTrace>)> {
    config.validate()?;
    let ctx = BenchContext::new(config.problem, config.grid_count)?;
    Ok(run_monte_carlo_with(&ctx, config))
}

pub fn run_monte_carlo_with(ctx: &BenchContext, config: &RunConfig) -> (AggregateMetrics, Vec<RunTrace>) {
    let traces: Vec<RunTrace> =
        (0..config.total_repetitions()).into_par_iter().map(|r| run_with_context(ctx, config, r)).collect();
    (AggregateMetrics::from_traces(config, &traces), traces)
}

/// The default π grid {0, 0.1, ..., 1}.
pub fn default_pi_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// One switching-rule run per π plus one EI_C run, all sharing initializations.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub points: Vec<(AggregateMetrics, Vec<RunTrace>)>,
    pub eic: (AggregateMetrics, Vec<RunTrace>),
}

pub fn pi_sweep(base: &RunConfig, pis: &[f64]) -> Result<SweepResult> {
    if let Some(p) = pis.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidParameter(format!("pi must lie in [0, 1], got {p}")));
    }
    base.validate()?;
    let ctx = BenchContext::new(base.problem, base.grid_count)?;
    let points = pis
        .iter()
        .map(|&pi| {
            let cfg = RunConfig { pi, acquisition: AcquisitionKind::Switching, ..base.clone() };
            run_monte_carlo_with(&ctx, &cfg)
        })
        .collect();
    let eic = run_monte_carlo_with(&ctx, &RunConfig { acquisition: AcquisitionKind::ConstrainedEi, ..base.clone() });
    Ok(SweepResult { points, eic })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub dataset_size: usize,
    pub candidates: usize,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Wall clock of one full iteration (fit every constraint model, score all
/// remaining candidates without shortcuts, select) at each dataset size.
pub fn timing_probe(problem: ProblemName, grid_count: usize, sizes: &[usize], repeats: usize) -> Result<Vec<TimingSample>> {
    if grid_count == 0 {
        return Err(Error::EmptyCandidates);
    }
    let ctx = BenchContext::new(problem, grid_count)?;
    let p = &ctx.problem;
    let mut fit = default_fit();
    fit.settings.input_bounds = Some(p.bounds.clone());
    let rule = BatchConfig::default().rule();
    sizes
        .iter()
        .map(|&n| {
            let ids = ctx.initial_indices(0, n, n);
            let mut dataset = Dataset::new(p.dims(), p.constraint_count())?;
            for &id in &ids {
                let x = ctx.pool.set().point(id);
                dataset.push(x.to_vec(), &p.constraint_values(x))?;
            }
            let mut pool = ctx.pool.clone();
            pool.remove(&ids);
            let feas = dataset_feasibility(&dataset, &p.specs);
            let mut samples = Vec::with_capacity(repeats);
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let models = fit_models(&dataset, &fit, None)?;
                let inc = Incumbent::compute(&dataset, &p.specs, p, pool.costs().max());
                let scores = score_candidates(&models, &p.specs, &pool, &inc, rule.pi(), ScoreMode::Full)?;
                std::hint::black_box(rule.select(&scores, &feas)?);
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(TimingSample { dataset_size: n, candidates: pool.remaining().len(), median_ms: median(&samples), samples_ms: samples })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Writes `metrics.json`, `table.csv`, `convergence.csv` and
/// `traces/rep_####.jsonl` under `dir`.
pub fn write_outputs(dir: &Path, runs: &[(AggregateMetrics, Vec<RunTrace>)]) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))?;
    let metrics: Vec<&AggregateMetrics> = runs.iter().map(|(m, _)| m).collect();
    let mut f = BufWriter::new(File::create(dir.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    f.flush()?;

    let mut table = csv::Writer::from_path(dir.join("table.csv"))?;
    let mut header = vec!["metric".to_string()];
    header.extend(metrics.iter().map(|m| m.label.clone()));
    table.write_record(&header)?;
    type Getter = fn(&AggregateMetrics) -> f64;
    let rows: [(&str, Getter); 3] = [
        ("required_iterations", |m| m.mean_required_iterations),
        ("feasible_fraction", |m| m.feasible_fraction),
        ("feasible_fraction_with_init", |m| m.feasible_fraction_with_init),
    ];
    for (name, get) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(metrics.iter().map(|m| get(m).to_string()));
        table.write_record(&rec)?;
    }
    table.flush()?;

    let mut conv = csv::Writer::from_path(dir.join("convergence.csv"))?;
    conv.write_record(["label", "repetition", "step", "best_feasible"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for m in &metrics {
        for (i, v) in m.mean_convergence().into_iter().enumerate() {
            conv.write_record([m.label.clone(), "mean".into(), i.to_string(), opt(v)])?;
        }
        for (r, series) in m.convergence.iter().enumerate() {
            for (i, v) in series.iter().enumerate() {
                conv.write_record([m.label.clone(), r.to_string(), i.to_string(), opt(*v)])?;
            }
        }
    }
    conv.flush()?;

    let reps = runs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    for r in 0..reps {
        let mut f = BufWriter::new(File::create(dir.join("traces").join(format!("rep_{r:04}.jsonl")))?);
        for (m, traces) in runs {
            let Some(t) = traces.get(r) else { continue };
            for e in &t.entries {
                let line = serde_json::json!({
                    "label": m.label,
                    "repetition": t.repetition,
                    "init_index": t.init_index,
                    "stop": t.stop,
                    "entry": e,
                });
                serde_json::to_writer(&mut f, &line)?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(problem: ProblemName, acq: AcquisitionKind) -> RunConfig {
        RunConfig { repetitions: 2, max_iterations: 3, grid_count: 400, ..RunConfig::new(problem, acq) }
    }

    #[test]
    fn zero_budget_keeps_only_initialization() {
        let cfg = RunConfig { max_iterations: 0, ..small(ProblemName::P1, AcquisitionKind::Switching) };
        let t = run_single(&cfg, 0).unwrap();
        assert_eq!(t.entries.len(), 2);
        assert!(t.entries.iter().all(|e| e.iteration == 0));
        assert_eq!(t.stop, StopReason::MaxIterations);
        assert_eq!(t.required_iterations, 0);
    }

    #[test]
    fn initializations_are_shared_across_rules() {
        let ctx = BenchContext::new(ProblemName::P2, 400).unwrap();
        let a = run_with_context(&ctx, &small(ProblemName::P2, AcquisitionKind::Switching), 1);
        let b = run_with_context(&ctx, &small(ProblemName::P2, AcquisitionKind::ConstrainedEi), 1);
        assert_eq!(a.entries[..2], b.entries[..2]);
    }

    #[test]
    fn noisy_layout_maps_repetitions_to_initializations() {
        let cfg = RunConfig { tau: 0.2, ..RunConfig::new(ProblemName::P3, AcquisitionKind::Switching) };
        assert_eq!(cfg.total_repetitions(), 100);
        assert_eq!(cfg.init_index(0), 0);
        assert_eq!(cfg.init_index(4), 0);
        assert_eq!(cfg.init_index(5), 1);
        assert_eq!(cfg.init_index(99), 19);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn empty_grid_is_rejected_before_timing() {
        assert!(matches!(timing_probe(ProblemName::P1, 0, &[10], 5), Err(Error::EmptyCandidates)));
    }
}
