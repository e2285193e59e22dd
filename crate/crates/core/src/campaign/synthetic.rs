//! Synthetic stand-ins for physical processes, used for desk-scale studies.
//!
//! The responses are smooth radial-basis mixtures; their shapes are chosen
//! so that the feasible windows cover a few percent of the input space and
//! the status measurement shifts the outputs, not to mimic any real machine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{campaign_fit, CampaignConfig, InitData, NamedConstraint, ObjectiveSpec, SessionState, StatusConfig, Term};
use crate::acquisition::{is_feasible, ConstraintSpec};
use crate::batch::BatchConfig;
use crate::calibration::{GridAxis, GridSpec};
use crate::error::Result;
use crate::gp::Dataset;
use crate::problems::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub height: f64,
    /// Inputs the bump depends on, one per centre coordinate; all inputs when absent.
    #[serde(default)]
    pub inputs: Option<Vec<usize>>,
}

impl Bump {
    pub fn new(center: Vec<f64>, width: f64, height: f64) -> Self {
        Self { center, width, height, inputs: None }
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d2: f64 = match &self.inputs {
            Some(idx) => idx.iter().zip(&self.center).map(|(&i, c)| (x[i] - c).powi(2)).sum(),
            None => self.center.iter().zip(x).map(|(c, v)| (v - c).powi(2)).sum(),
        };
        self.height * (-d2 / (2.0 * self.width * self.width)).exp()
    }
}

/// `intercept + linear . x + sum of Gaussian bumps + status_coefficient * u`,
/// where `u` is the normalized status value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub intercept: f64,
    pub linear: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<f64>,
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub status_coefficient: f64,
}

impl Response {
    pub fn value(&self, x: &[f64], u: f64) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(w, v)| w * v).sum();
        let quad: f64 = self.quadratic.iter().zip(x).map(|(w, v)| w * v * v).sum();
        let bumps: f64 = self.bumps.iter().map(|b| b.value(x)).sum();
        self.intercept + lin + quad + bumps + self.status_coefficient * u
    }
}

/// Controllable inputs to constrained outputs, optionally through a
/// drifting status measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProcessOracle {
    pub dims: usize,
    /// Status value as a function of the controllable inputs, before drift.
    pub status: Option<Response>,
    /// Status normalization `u = (V - reference) / span`.
    pub status_reference: f64,
    pub status_span: f64,
    pub status_noise: f64,
    pub outputs: Vec<Response>,
    pub output_noise: Vec<f64>,
    pub seed: u64,
}

/// Result of one synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeasurement {
    pub outputs: Vec<f64>,
    pub status: Option<f64>,
}

impl SyntheticProcessOracle {
    /// Six inputs, hardness-like and porosity-like outputs, voltage-like status.
    pub fn aps_like(seed: u64) -> Self {
        Self {
            dims: 6,
            status: Some(Response {
                intercept: 62.0,
                linear: vec![6.0, 4.0, -3.0, 0.0, 0.0, 0.0],
                quadratic: vec![0.0, 0.0, 0.0, 0.8, 0.8, 0.0],
                bumps: vec![],
                status_coefficient: 0.0,
            }),
            status_reference: 65.0,
            status_span: 5.0,
            status_noise: 0.2,
            outputs: vec![
                Response {
                    intercept: 560.0,
                    linear: vec![0.0, 0.0, 0.0, 0.0, 0.0, 10.0],
                    quadratic: vec![],
                    bumps: vec![Bump::new(vec![0.6, 0.4, 0.5, 0.5, 0.5, 0.5], 0.45, 140.0)],
                    status_coefficient: 12.0,
                },
                Response {
                    intercept: 11.5,
                    linear: vec![],
                    quadratic: vec![],
                    bumps: vec![Bump::new(vec![0.5, 0.5, 0.4, 0.6, 0.5, 0.5], 0.5, -5.5)],
                    status_coefficient: -0.8,
                },
            ],
            output_noise: vec![3.0, 0.1],
            seed,
        }
    }

    /// Two inputs (extrusion rate, speed) and one roughness-like output;
    /// no status measurement.
    pub fn fdm_like(seed: u64) -> Self {
        Self {
            dims: 2,
            status: None,
            status_reference: 0.0,
            status_span: 1.0,
            status_noise: 0.0,
            outputs: vec![Response {
                intercept: 3.16,
                linear: vec![-6.4, 7.0],
                quadratic: vec![8.0, 2.0],
                bumps: vec![],
                status_coefficient: 0.0,
            }],
            output_noise: vec![0.3],
            seed,
        }
    }

    pub fn true_status(&self, x: &[f64], drift: f64) -> Option<f64> {
        self.status.as_ref().map(|s| s.value(x, 0.0) + drift)
    }

    /// Noise-free outputs at the actual status value.
    pub fn true_outputs(&self, x: &[f64], drift: f64) -> Vec<f64> {
        let u = self.true_status(x, drift).map_or(0.0, |v| (v - self.status_reference) / self.status_span);
        self.outputs.iter().map(|r| r.value(x, u)).collect()
    }

    /// Measurement number `counter`; deterministic in `(x, drift, seed, counter)`.
    pub fn measure(&self, x: &[f64], drift: f64, counter: u64) -> SyntheticMeasurement {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 0x5E5, counter]));
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let outputs = self.true_outputs(x, drift).into_iter().zip(&self.output_noise).map(|(v, s)| v + s * z()).collect();
        let status = self.true_status(x, drift).map(|v| v + self.status_noise * z());
        SyntheticMeasurement { outputs, status }
    }
}

fn unit_grid(dims: usize, count: usize) -> GridSpec {
    GridSpec::new(vec![GridAxis { lower: 0.0, upper: 1.0, count }; dims])
}

/// Campaign config for the APS-like study (n = 5, π = 0.4, ε = 0.05).
pub fn aps_config(init: Option<InitData>) -> CampaignConfig {
    CampaignConfig {
        name: "aps-synthetic".into(),
        description: "synthetic APS-like process: six settings, hardness/porosity windows, drifting voltage".into(),
        grid: unit_grid(6, 5),
        status: Some(StatusConfig { name: "voltage".into() }),
        constraints: vec![
            NamedConstraint { name: "hardness".into(), spec: ConstraintSpec::Interval { lower: 635.0, upper: 675.0 } },
            NamedConstraint { name: "porosity".into(), spec: ConstraintSpec::Interval { lower: 6.0, upper: 8.2 } },
        ],
        objective: ObjectiveSpec {
            label: "stress index (synthetic)".into(),
            intercept: 100.0,
            terms: vec![
                Term { input: 0, coefficient: 30.0, exponent: 1.0, shift: 0.0 },
                Term { input: 1, coefficient: 20.0, exponent: 2.0, shift: 0.0 },
                Term { input: 2, coefficient: 15.0, exponent: 1.0, shift: 0.0 },
            ],
        },
        batch: BatchConfig { batch_size: 5, pi: 0.4, termination_threshold: 0.05, ..BatchConfig::default() },
        fit: campaign_fit(),
        init,
        init_csv: None,
        append_baseline: true,
    }
}

/// Campaign config for the FDM-like study (sequential, roughness <= 10).
pub fn fdm_config(init: Option<InitData>) -> CampaignConfig {
    CampaignConfig {
        name: "fdm-synthetic".into(),
        description: "synthetic FDM-like process: extrusion rate and speed; roughness limit".into(),
        grid: unit_grid(2, 41),
        status: None,
        constraints: vec![NamedConstraint { name: "roughness".into(), spec: ConstraintSpec::Upper { upper: 10.0 } }],
        objective: ObjectiveSpec {
            label: "print time (synthetic)".into(),
            intercept: 5.0,
            terms: vec![
                Term { input: 0, coefficient: 12.0, exponent: -1.0, shift: 0.25 },
                Term { input: 1, coefficient: 8.0, exponent: -1.0, shift: 0.25 },
            ],
        },
        batch: BatchConfig { batch_size: 1, pi: 0.4, termination_threshold: 0.05, ..BatchConfig::default() },
        fit: campaign_fit(),
        init,
        init_csv: None,
        append_baseline: true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub drift: f64,
    pub offset: f64,
    pub candidates: Vec<Vec<f64>>,
    pub selection_fips: Vec<f64>,
    pub measurements: Vec<Vec<f64>>,
    pub feasible: usize,
    pub incumbent: Option<f64>,
    pub termination_recommended: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationReport {
    pub sessions: Vec<SessionSummary>,
    pub terminated: bool,
    pub feasible_samples: usize,
    pub evaluations: usize,
    pub state: SessionState,
}

impl SimulationReport {
    pub fn incumbent_series(&self) -> Vec<Option<f64>> {
        self.sessions.iter().map(|s| s.incumbent).collect()
    }
}

fn session_drift(rng: &mut ChaCha8Rng, session: usize) -> f64 {
    match session {
        0 => 2.0,
        1 => -0.8,
        _ => rng.random_range(-2.0..2.0),
    }
}

/// Initialization experiments at random settings, none of them feasible.
pub fn infeasible_init(oracle: &SyntheticProcessOracle, specs: &[ConstraintSpec], count: usize, seed: u64) -> InitData {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x1A17]));
    let mut inputs = Vec::with_capacity(count);
    let mut measurements = Vec::with_capacity(count);
    let mut counter = 1u64 << 40;
    while inputs.len() < count {
        let x: Vec<f64> = (0..oracle.dims).map(|_| rng.random::<f64>()).collect();
        let m = oracle.measure(&x, 0.0, counter);
        counter += 1;
        if is_feasible(&m.outputs, specs) {
            continue;
        }
        let mut row = x;
        row.extend(m.status);
        inputs.push(row);
        measurements.push(m.outputs);
    }
    InitData { inputs, measurements }
}

/// APS-like campaign: 86 infeasible initialization experiments, one
/// calibration and one batch of five per session, until the termination
/// rule recommends stopping or `max_batches` sessions have run. The first
/// two sessions drift by +2.0 and -0.8; later drifts are random in (-2, 2).
pub fn simulate_aps(seed: u64, max_batches: usize) -> Result<SimulationReport> {
    let oracle = SyntheticProcessOracle::aps_like(seed);
    let probe = aps_config(None);
    let init = infeasible_init(&oracle, &probe.specs(), 86, seed);
    let config = aps_config(Some(init.clone()));
    let dataset = config.initial_dataset(None)?;
    let mut state = SessionState::init(config, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xD71F]));
    let dc = oracle.dims;
    let baseline: Vec<f64> = init.inputs[0][..dc].to_vec();
    let specs = state.config.specs();
    let mut counter = 0u64;
    let mut sessions = Vec::new();
    let mut terminated = false;

    for session in 0..max_batches {
        let drift = session_drift(&mut rng, session);
        let b = oracle.measure(&baseline, drift, counter);
        counter += 1;
        let offset = state.calibrate(&baseline, b.status.expect("status"), Some(b.outputs), false)?.delta;
        let batch = state.suggest(None, None)?.clone();
        let mut measurements = Vec::with_capacity(batch.len());
        let mut status = Vec::with_capacity(batch.len());
        for x in &batch.candidates {
            let m = oracle.measure(&x[..dc], drift, counter);
            counter += 1;
            measurements.push(m.outputs);
            status.push(m.status.expect("status"));
        }
        let feasible = measurements.iter().filter(|m| is_feasible(m, &specs)).count();
        let out = state.record(measurements.clone(), Some(status))?;
        sessions.push(SessionSummary {
            session,
            drift,
            offset,
            candidates: batch.candidates.clone(),
            selection_fips: batch.selection_fips.clone(),
            measurements,
            feasible,
            incumbent: out.incumbent.map(|i| i.cost),
            termination_recommended: out.termination_recommended,
        });
        if out.termination_recommended {
            terminated = true;
            break;
        }
    }
    let status = state.status();
    Ok(SimulationReport {
        sessions,
        terminated,
        feasible_samples: status.feasible,
        evaluations: status.evaluations,
        state,
    })
}

/// Per-seed selection-time feasibility after the switch point, for a run
/// that keeps π and one that lowers it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdmRun {
    pub seed: u64,
    pub before_switch: Vec<f64>,
    pub kept: Vec<f64>,
    pub switched: Vec<f64>,
    pub kept_feasible: usize,
    pub switched_feasible: usize,
    pub kept_best: Option<f64>,
    pub switched_best: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdmStudy {
    pub pi_before: f64,
    pub pi_after: f64,
    pub switch_after: usize,
    pub runs: Vec<FdmRun>,
    pub mean_fp_kept: f64,
    pub mean_fp_switched: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// FDM-like sequential campaign from seven initialization experiments.
/// After `switch_after` total experiments, the run forks: one branch keeps
/// π = `pi_before`, the other uses `pi_after`, for `extra` more experiments.
pub fn fdm_pi_switch_study(
    seeds: &[u64],
    switch_after: usize,
    extra: usize,
    pi_before: f64,
    pi_after: f64,
) -> Result<FdmStudy> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let oracle = SyntheticProcessOracle::fdm_like(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xFD]));
        let mut counter = 0u64;
        let mut init = InitData { inputs: Vec::new(), measurements: Vec::new() };
        for _ in 0..7 {
            let x: Vec<f64> = (0..oracle.dims).map(|_| rng.random::<f64>()).collect();
            init.measurements.push(oracle.measure(&x, 0.0, counter).outputs);
            counter += 1;
            init.inputs.push(x);
        }
        let config = fdm_config(Some(init));
        let dataset = config.initial_dataset(None)?;
        let mut state = SessionState::init(config, dataset)?;
        let specs = state.config.specs();

        let step = |state: &mut SessionState, pi: f64, counter: u64| -> Result<(f64, bool)> {
            let b = state.suggest(Some(1), Some(pi))?.clone();
            let m = oracle.measure(&b.candidates[0], 0.0, counter);
            let feasible = is_feasible(&m.outputs, &specs);
            state.record(vec![m.outputs], None)?;
            Ok((b.records[0].feasibility, feasible))
        };

        let mut before = Vec::new();
        while state.dataset.len() < switch_after {
            before.push(step(&mut state, pi_before, counter)?.0);
            counter += 1;
        }
        let mut kept_state = state.clone();
        let mut switched_state = state;
        let (mut kept, mut switched) = (Vec::new(), Vec::new());
        let (mut kept_feasible, mut switched_feasible) = (0, 0);
        for i in 0..extra as u64 {
            // both branches see the same noise draw at the same step
            let (fp, ok) = step(&mut kept_state, pi_before, counter + i)?;
            kept.push(fp);
            kept_feasible += usize::from(ok);
            let (fp, ok) = step(&mut switched_state, pi_after, counter + i)?;
            switched.push(fp);
            switched_feasible += usize::from(ok);
        }
        runs.push(FdmRun {
            seed,
            before_switch: before,
            kept,
            switched,
            kept_feasible,
            switched_feasible,
            kept_best: kept_state.incumbent().map(|i| i.cost),
            switched_best: switched_state.incumbent().map(|i| i.cost),
        });
    }
    Ok(FdmStudy {
        pi_before,
        pi_after,
        switch_after,
        mean_fp_kept: mean(runs.iter().flat_map(|r| r.kept.iter().copied())),
        mean_fp_switched: mean(runs.iter().flat_map(|r| r.switched.iter().copied())),
        runs,
    })
}

/// Initialization dataset of the APS-like study, for exporting example sessions.
pub fn aps_initial_dataset(seed: u64) -> Result<Dataset> {
    let oracle = SyntheticProcessOracle::aps_like(seed);
    let init = infeasible_init(&oracle, &aps_config(None).specs(), 86, seed);
    aps_config(Some(init)).initial_dataset(None)
}
