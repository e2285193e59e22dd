//! Two-dimensional benchmark problems with a known objective and black-box
//! constraints, their candidate grids, and the seeded noise model.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{is_feasible, ConstraintSpec};
use crate::candidates::{CandidateSet, Objective};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemName {
    P1,
    P2,
    P3,
}

impl ProblemName {
    pub const ALL: [ProblemName; 3] = [ProblemName::P1, ProblemName::P2, ProblemName::P3];

    pub(crate) fn id(self) -> u64 {
        match self {
            ProblemName::P1 => 1,
            ProblemName::P2 => 2,
            ProblemName::P3 => 3,
        }
    }
}

impl fmt::Display for ProblemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemName::P1 => "p1",
            ProblemName::P2 => "p2",
            ProblemName::P3 => "p3",
        })
    }
}

impl FromStr for ProblemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(ProblemName::P1),
            "p2" => Ok(ProblemName::P2),
            "p3" => Ok(ProblemName::P3),
            other => Err(Error::InvalidParameter(format!("unknown problem {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkProblem {
    pub name: ProblemName,
    pub bounds: Vec<(f64, f64)>,
    pub objective_formula: &'static str,
    pub constraint_formulas: Vec<&'static str>,
    pub specs: Vec<ConstraintSpec>,
    /// Input-space radius around the grid optimum accepted as converged in
    /// the noisy protocol.
    pub tolerance_radius: f64,
}

impl BenchmarkProblem {
    pub fn new(name: ProblemName) -> Self {
        match name {
            ProblemName::P1 => Self {
                name,
                bounds: vec![(0.0, 6.0); 2],
                objective_formula: "cos(2*x1)*cos(x2) + sin(x1)",
                constraint_formulas: vec!["cos(x1)*cos(x2) - sin(x1)*sin(x2)"],
                specs: vec![ConstraintSpec::upper(-0.5)],
                tolerance_radius: 0.15,
            },
            ProblemName::P2 => Self {
                name,
                bounds: vec![(0.0, 6.0); 2],
                objective_formula: "sin(x1) + x2",
                constraint_formulas: vec!["sin(x1)*sin(x2)"],
                specs: vec![ConstraintSpec::upper(-0.95)],
                tolerance_radius: 0.15,
            },
            ProblemName::P3 => Self {
                name,
                bounds: vec![(0.0, 1.0); 2],
                objective_formula: "x1 + x2",
                constraint_formulas: vec![
                    "1.5 - x1 - 2*x2 - 0.5*sin(2*pi*(x1^2 - 2*x2))",
                    "x1^2 + x2^2 - 1.5",
                ],
                specs: vec![ConstraintSpec::upper(0.0), ConstraintSpec::upper(0.0)],
                tolerance_radius: 0.0125,
            },
        }
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.specs.len()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.len() == self.dims() && x.iter().zip(&self.bounds).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Objective value without a domain check.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let (x1, x2) = (x[0], x[1]);
        match self.name {
            ProblemName::P1 => (2.0 * x1).cos() * x2.cos() + x1.sin(),
            ProblemName::P2 => x1.sin() + x2,
            ProblemName::P3 => x1 + x2,
        }
    }

    /// True constraint values without a domain check.
    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        let (x1, x2) = (x[0], x[1]);
        match self.name {
            ProblemName::P1 => vec![x1.cos() * x2.cos() - x1.sin() * x2.sin()],
            ProblemName::P2 => vec![x1.sin() * x2.sin()],
            ProblemName::P3 => vec![
                1.5 - x1 - 2.0 * x2 - 0.5 * (2.0 * PI * (x1 * x1 - 2.0 * x2)).sin(),
                x1 * x1 + x2 * x2 - 1.5,
            ],
        }
    }

    /// Objective and constraint values at an in-domain point.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !self.in_domain(x) {
            return Err(Error::OutOfDomain(x.to_vec()));
        }
        Ok((self.objective_value(x), self.constraint_values(x)))
    }

    pub fn is_feasible(&self, x: &[f64]) -> bool {
        is_feasible(&self.constraint_values(x), &self.specs)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "bounds": self.bounds,
            "objective": self.objective_formula,
            "constraints": self.constraint_formulas.iter().zip(&self.specs).map(|(f, s)| {
                serde_json::json!({ "formula": f, "spec": s })
            }).collect::<Vec<_>>(),
            "tolerance_radius": self.tolerance_radius,
        })
    }
}

impl Objective for BenchmarkProblem {
    fn cost(&self, x: &[f64]) -> f64 {
        self.objective_value(x)
    }

    fn describe(&self) -> String {
        format!("{}: {}", self.name, self.objective_formula)
    }
}

/// Uniform rectangular grid over `bounds` holding exactly `count` points.
///
/// Every dimension gets the smallest common per-axis count `m` with
/// `m^d >= count`; the row-major enumeration (first coordinate slowest) is
/// truncated to the first `count` points.
pub fn make_grid(bounds: &[(f64, f64)], count: usize) -> Result<CandidateSet> {
    if count < 4 {
        return Err(Error::InvalidParameter(format!("grid count must be at least 4, got {count}")));
    }
    if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::InvalidParameter(format!("invalid grid bounds {bounds:?}")));
    }
    let d = bounds.len() as u32;
    let mut m = 2usize;
    while m.checked_pow(d).is_some_and(|p| p < count) {
        m += 1;
    }
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| axis(lo, hi, m)).collect();
    let points = (0..count)
        .map(|mut idx| {
            let mut p = vec![0.0; bounds.len()];
            for dim in (0..bounds.len()).rev() {
                p[dim] = axes[dim][idx % m];
                idx /= m;
            }
            p
        })
        .collect();
    CandidateSet::new(points)
}

pub(crate) fn axis(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| if i + 1 == m { hi } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 })
        .collect()
}

/// Gaussian measurement noise on constraint evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub tau: f64,
    pub seed: u64,
}

/// Counter-based noise source keyed by `(seed, problem, repetition, evaluation)`.
///
/// Draws depend only on the key, so two optimizers sharing a repetition see
/// identical noise at identical evaluation indices.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    config: NoiseConfig,
    problem: ProblemName,
    repetition: u64,
    counter: u64,
}

impl NoiseStream {
    pub fn new(config: NoiseConfig, problem: ProblemName, repetition: u64) -> Self {
        Self { config, problem, repetition, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Perturbations for evaluation `index`, one per constraint.
    pub fn draws_at(&self, index: u64, constraints: usize) -> Vec<f64> {
        if self.config.tau == 0.0 {
            return vec![0.0; constraints];
        }
        let key = mix(&[self.config.seed, self.problem.id(), self.repetition, index]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        (0..constraints)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.config.tau * z
            })
            .collect()
    }

    /// Perturbations for the next evaluation; advances the counter.
    pub fn next_draws(&mut self, constraints: usize) -> Vec<f64> {
        let d = self.draws_at(self.counter, constraints);
        self.counter += 1;
        d
    }
}

pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 29)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 32;
    }
    h
}

/// Objective (uncorrupted) and constraints with additive noise from `stream`.
pub fn noisy_evaluate(problem: &BenchmarkProblem, x: &[f64], stream: &mut NoiseStream) -> Result<(f64, Vec<f64>)> {
    let (f, c) = problem.evaluate(x)?;
    let noise = stream.next_draws(c.len());
    Ok((f, c.iter().zip(noise).map(|(v, e)| v + e).collect()))
}

/// Best feasible grid point under the true constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOracle {
    pub index: usize,
    pub point: Vec<f64>,
    pub objective: f64,
    pub tolerance_radius: f64,
}

impl OptimizerOracle {
    pub fn within_radius(&self, x: &[f64]) -> bool {
        let d2: f64 = x.iter().zip(&self.point).map(|(a, b)| (a - b).powi(2)).sum();
        d2.sqrt() <= self.tolerance_radius
    }
}

/// Brute-force scan for the feasible minimizer; ties go to the lowest index.
pub fn find_grid_optimum(problem: &BenchmarkProblem, grid: &CandidateSet) -> Result<OptimizerOracle> {
    if grid.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in grid.points().iter().enumerate() {
        if problem.is_feasible(p) {
            let f = problem.objective_value(p);
            if best.is_none_or(|(_, b)| f < b) {
                best = Some((i, f));
            }
        }
    }
    let (index, objective) = best.ok_or(Error::NoFeasibleGridPoint)?;
    Ok(OptimizerOracle {
        index,
        point: grid.point(index).to_vec(),
        objective,
        tolerance_radius: problem.tolerance_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_spot_values() {
        let p1 = BenchmarkProblem::new(ProblemName::P1);
        let (f, c) = p1.evaluate(&[0.0, 0.0]).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(c, vec![1.0]);
        assert!(!p1.is_feasible(&[0.0, 0.0]));

        let p3 = BenchmarkProblem::new(ProblemName::P3);
        let (f, c) = p3.evaluate(&[0.0, 0.0]).unwrap();
        assert_eq!(f, 0.0);
        assert_eq!(c, vec![1.5, -1.5]);
        assert!(!p3.specs[0].is_satisfied(c[0]));
        assert!(p3.specs[1].is_satisfied(c[1]));

        let p2 = BenchmarkProblem::new(ProblemName::P2);
        let x = [PI / 2.0, 3.0 * PI / 2.0];
        let (f, c) = p2.evaluate(&x).unwrap();
        assert!((c[0] + 1.0).abs() < 1e-15);
        assert!(p2.is_feasible(&x));
        assert!((f - (1.0 + 3.0 * PI / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let p3 = BenchmarkProblem::new(ProblemName::P3);
        assert!(matches!(p3.evaluate(&[1.1, 0.0]), Err(Error::OutOfDomain(_))));
        assert!(p3.evaluate(&[0.5]).is_err());
    }

    #[test]
    fn corner_grid() {
        let g = make_grid(&[(0.0, 1.0), (0.0, 1.0)], 4).unwrap();
        assert_eq!(g.points(), &[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!(make_grid(&[(0.0, 1.0)], 3).is_err());
    }

    #[test]
    fn default_grid_is_truncated_square() {
        let p1 = BenchmarkProblem::new(ProblemName::P1);
        let g = make_grid(&p1.bounds, 20_000).unwrap();
        assert_eq!(g.len(), 20_000);
        assert!(g.points().iter().all(|p| p1.in_domain(p)));
        // 142 points per axis
        assert_eq!(g.point(141), &[0.0, 6.0]);
        assert_eq!(g.point(142)[0], 6.0 / 141.0);
        let mut sorted: Vec<(u64, u64)> = g.points().iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20_000);
        assert_eq!(make_grid(&p1.bounds, 20_000).unwrap(), g);
    }

    #[test]
    fn zero_tau_is_noiseless() {
        let p3 = BenchmarkProblem::new(ProblemName::P3);
        let mut s = NoiseStream::new(NoiseConfig { tau: 0.0, seed: 3 }, ProblemName::P3, 0);
        let x = [0.3, 0.4];
        assert_eq!(noisy_evaluate(&p3, &x, &mut s).unwrap(), p3.evaluate(&x).unwrap());
    }

    #[test]
    fn noise_streams_are_keyed() {
        let cfg = NoiseConfig { tau: 0.2, seed: 11 };
        let a = NoiseStream::new(cfg, ProblemName::P1, 0);
        let b = NoiseStream::new(cfg, ProblemName::P1, 1);
        assert_eq!(a.draws_at(5, 2), a.clone().draws_at(5, 2));
        assert_ne!(a.draws_at(5, 2), b.draws_at(5, 2));
        assert_ne!(a.draws_at(5, 2), a.draws_at(6, 2));
        let mut c = a.clone();
        c.next_draws(2);
        assert_eq!(c.next_draws(2), a.draws_at(1, 2));
    }

    #[test]
    fn degenerate_grid_has_no_feasible_point() {
        let p1 = BenchmarkProblem::new(ProblemName::P1);
        let g = make_grid(&p1.bounds, 4).unwrap();
        assert!(matches!(find_grid_optimum(&p1, &g), Err(Error::NoFeasibleGridPoint)));
    }

    #[test]
    fn names_parse() {
        assert_eq!("P2".parse::<ProblemName>().unwrap(), ProblemName::P2);
        assert!("p4".parse::<ProblemName>().is_err());
        assert_eq!(ProblemName::P3.to_string(), "p3");
    }
}
