//! Reference implementations shared by several test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use fipbo::acquisition::{dataset_feasibility, score_candidates, select_candidate, ConstraintSpec, Incumbent, ScoreMode};
use fipbo::batch::fit_models;
use fipbo::candidates::{CandidatePool, Objective};
use fipbo::gp::{Dataset, FitConfig, GpModel, KernelParams};
use fipbo::problems::{make_grid, BenchmarkProblem};

/// GP posterior recomputed from the displayed formulas: scaled inputs,
/// standardized outputs, an LU solve instead of a triangular factor. Shares
/// nothing with the library beyond the model's reported hyperparameters.
pub struct DenseOracle {
    bounds: Vec<(f64, f64)>,
    x: Vec<Vec<f64>>,
    a: DMatrix<f64>,
    y: DVector<f64>,
    mean: f64,
    scale: f64,
    params: KernelParams,
}

fn se(a: &[f64], b: &[f64], p: &KernelParams) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(&p.lengthscales).map(|((u, v), l)| ((u - v) / l).powi(2)).sum();
    p.signal_variance * (-0.5 * r2).exp()
}

impl DenseOracle {
    pub fn new(ds: &Dataset, model: &GpModel, bounds: &[(f64, f64)]) -> Self {
        let params = model.params().clone();
        let bounds = bounds.to_vec();
        let scale_input = |x: &[f64]| -> Vec<f64> { x.iter().zip(&bounds).map(|(v, (lo, hi))| (v - lo) / (hi - lo)).collect() };
        let x: Vec<Vec<f64>> = ds.inputs().iter().map(|r| scale_input(r)).collect();
        let obs = ds.observations(0);
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let sd = (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
        let diag = params.noise_variance + model.jitter();
        let a = DMatrix::from_fn(x.len(), x.len(), |i, j| se(&x[i], &x[j], &params) + if i == j { diag } else { 0.0 });
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|v| (v - mean) / scale));
        Self { bounds, x, a, y, mean, scale, params }
    }

    /// Posterior mean and latent variance at `q`, in original units.
    pub fn predict(&self, q: &[f64]) -> (f64, f64) {
        let q: Vec<f64> = q.iter().zip(&self.bounds).map(|(v, (lo, hi))| (v - lo) / (hi - lo)).collect();
        let k = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| se(xi, &q, &self.params)));
        let lu = self.a.clone().lu();
        let w = lu.solve(&self.y).unwrap();
        let v = lu.solve(&k).unwrap();
        let mean = self.mean + self.scale * k.dot(&w);
        let var = self.scale * self.scale * (self.params.signal_variance - k.dot(&v));
        (mean, var)
    }

    pub fn log_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let inv = self.a.clone().try_inverse().unwrap();
        -0.5 * (self.y.transpose() * inv * &self.y)[(0, 0)] - 0.5 * self.a.determinant().ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// A plain one-at-a-time loop: fit, score every candidate, select, evaluate,
/// stop once the selected candidate's FIP falls below `eps`. Returns the
/// selected candidate ids with their FIP values.
#[allow(clippy::too_many_arguments)]
pub fn sequential_loop(
    ds: &Dataset,
    pool: &CandidatePool,
    specs: &[ConstraintSpec],
    objective: &dyn Objective,
    oracle: &dyn Fn(&[f64]) -> Vec<f64>,
    fit: &FitConfig,
    pi: f64,
    eps: f64,
    steps: usize,
) -> Vec<(usize, f64)> {
    let (mut ds, mut pool) = (ds.clone(), pool.clone());
    let mut prev: Option<Vec<GpModel>> = None;
    let mut out = Vec::new();
    for _ in 0..steps {
        if pool.is_exhausted() {
            break;
        }
        let models = fit_models(&ds, fit, prev.as_deref()).unwrap();
        let inc = Incumbent::compute(&ds, specs, objective, pool.costs().max());
        let scores = score_candidates(&models, specs, &pool, &inc, pi, ScoreMode::Full).unwrap();
        let sel = select_candidate(&scores, &dataset_feasibility(&ds, specs), pi).unwrap();
        let fip = scores.alpha_fip[sel.position];
        out.push((sel.candidate_id, fip));
        pool.remove(&[sel.candidate_id]);
        if fip < eps {
            break;
        }
        let x = pool.set().point(sel.candidate_id).to_vec();
        ds.push(x.clone(), &oracle(&x)).unwrap();
        prev = Some(models);
    }
    out
}

/// Connected components of the feasible set under 8-neighbour adjacency on
/// the 142-wide lattice underlying the default 20,000-point grid, and the
/// feasible fraction of the grid.
pub fn feasible_components(p: &BenchmarkProblem) -> (usize, f64) {
    const SIDE: usize = 142;
    let g = make_grid(&p.bounds, 20_000).unwrap();
    let feasible: Vec<bool> = g.points().iter().map(|x| p.is_feasible(x)).collect();
    let mut label = vec![usize::MAX; g.len()];
    let mut count = 0;
    for start in 0..g.len() {
        if !feasible[start] || label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = count;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / SIDE) as i64, (i % SIDE) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nc >= SIDE as i64 {
                        continue;
                    }
                    let j = nr as usize * SIDE + nc as usize;
                    if j < g.len() && feasible[j] && label[j] == usize::MAX {
                        label[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
        count += 1;
    }
    let fraction = feasible.iter().filter(|&&f| f).count() as f64 / g.len() as f64;
    (count, fraction)
}
