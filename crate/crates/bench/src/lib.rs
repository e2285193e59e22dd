//! Fixtures shared by the criterion benchmarks.

use fipbo::acquisition::{ConstraintSpec, Incumbent};
use fipbo::batch::fit_models;
use fipbo::bench::{default_fit, BenchContext};
use fipbo::candidates::CandidatePool;
use fipbo::gp::{Dataset, GpModel};
use fipbo::problems::ProblemName;

/// A problem with `n` evaluated grid points, fitted models and the remaining pool.
pub struct Fixture {
    pub dataset: Dataset,
    pub models: Vec<GpModel>,
    pub pool: CandidatePool,
    pub specs: Vec<ConstraintSpec>,
    pub incumbent: Incumbent,
}

pub fn fixture(problem: ProblemName, n: usize, grid: usize) -> Fixture {
    let ctx = BenchContext::new(problem, grid).expect("benchmark grid");
    let p = &ctx.problem;
    let ids = ctx.initial_indices(7, 0, n);
    let mut dataset = Dataset::new(p.dims(), p.constraint_count()).expect("dataset");
    for &id in &ids {
        let x = ctx.pool.set().point(id);
        dataset.push(x.to_vec(), &p.constraint_values(x)).expect("distinct grid points");
    }
    let mut fit = default_fit();
    fit.settings.input_bounds = Some(p.bounds.clone());
    let models = fit_models(&dataset, &fit, None).expect("fit");
    let mut pool = ctx.pool.clone();
    pool.remove(&ids);
    let incumbent = Incumbent::compute(&dataset, &p.specs, p, pool.costs().max());
    Fixture { dataset, models, pool, specs: p.specs.clone(), incumbent }
}
