//! Harness behaviour on small grids; the full-scale comparisons live in the
//! acceptance target.

use fipbo::batch::AcquisitionKind;
use fipbo::bench::{
    default_pi_grid, median, pi_sweep, run_monte_carlo, run_single, timing_probe, write_outputs, AggregateMetrics,
    RunConfig, StopReason,
};
use fipbo::problems::{NoiseConfig, NoiseStream, ProblemName};

fn small(problem: ProblemName, acquisition: AcquisitionKind) -> RunConfig {
    RunConfig { grid_count: 900, max_iterations: 12, repetitions: 3, seed: 21, ..RunConfig::new(problem, acquisition) }
}

#[test]
fn identical_configs_give_identical_traces() {
    let cfg = small(ProblemName::P3, AcquisitionKind::Switching);
    let (m1, t1) = run_monte_carlo(&cfg).unwrap();
    let (m2, t2) = run_monte_carlo(&cfg).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
    let other = run_monte_carlo(&RunConfig { seed: 22, ..cfg }).unwrap().1;
    assert_ne!(t1, other);
}

#[test]
fn acquisitions_share_initializations_and_noise() {
    let alg1 = RunConfig { tau: 0.2, initializations: 2, noise_realizations: 2, ..small(ProblemName::P1, AcquisitionKind::Switching) };
    let eic = RunConfig { acquisition: AcquisitionKind::ConstrainedEi, ..alg1.clone() };
    for r in 0..alg1.total_repetitions() {
        let a = run_single(&alg1, r).unwrap();
        let b = run_single(&eic, r).unwrap();
        assert_eq!(a.init_index, r / 2);
        let init = |t: &fipbo::bench::RunTrace| -> Vec<(usize, Vec<f64>)> {
            t.entries.iter().filter(|e| e.iteration == 0).map(|e| (e.candidate, e.constraints.clone())).collect()
        };
        assert_eq!(init(&a), init(&b), "repetition {r}");
        // every evaluation index carries the same perturbation for both rules
        let stream = NoiseStream::new(NoiseConfig { tau: 0.2, seed: alg1.seed }, ProblemName::P1, r as u64);
        let p = fipbo::problems::BenchmarkProblem::new(ProblemName::P1);
        for t in [&a, &b] {
            for (i, e) in t.entries.iter().enumerate() {
                let truth = p.constraint_values(&e.x)[0];
                assert!((e.constraints[0] - truth - stream.draws_at(i as u64, 1)[0]).abs() < 1e-12);
            }
        }
    }
    // repetitions sharing an initialization differ only in their noise
    let (r0, r1) = (run_single(&alg1, 0).unwrap(), run_single(&alg1, 1).unwrap());
    assert_eq!(r0.entries[0].candidate, r1.entries[0].candidate);
    assert_ne!(r0.entries[0].constraints, r1.entries[0].constraints);
}

#[test]
fn zero_iterations_keeps_only_the_initialization() {
    let cfg = RunConfig { max_iterations: 0, ..small(ProblemName::P2, AcquisitionKind::Switching) };
    let t = run_single(&cfg, 0).unwrap();
    assert_eq!(t.entries.len(), 2);
    assert!(t.entries.iter().all(|e| e.iteration == 0));
    if t.stop != StopReason::OptimumFound {
        assert_eq!(t.stop, StopReason::MaxIterations);
        assert_eq!(t.required_iterations, 0);
    }
}

#[test]
fn initialization_holding_the_optimum_needs_no_iterations() {
    // every grid point is an initialization sample
    let cfg = RunConfig { grid_count: 100, init_count: 100, ..small(ProblemName::P1, AcquisitionKind::Switching) };
    let t = run_single(&cfg, 0).unwrap();
    assert_eq!(t.stop, StopReason::OptimumFound);
    assert_eq!(t.required_iterations, 0);
    assert_eq!(t.entries.len(), 100);
}

#[test]
fn traces_respect_their_bounds() {
    for problem in ProblemName::ALL {
        for acq in [AcquisitionKind::Switching, AcquisitionKind::ConstrainedEi] {
            let cfg = small(problem, acq);
            let (m, traces) = run_monte_carlo(&cfg).unwrap();
            assert_eq!(m.failed, 0);
            for t in &traces {
                assert!(t.entries.len() <= cfg.max_iterations + cfg.init_count);
                assert!(t.required_iterations <= cfg.max_iterations);
                if t.stop == StopReason::MaxIterations {
                    assert_eq!(t.required_iterations, cfg.max_iterations, "censored at the cap");
                }
                // no candidate is evaluated twice
                let mut ids: Vec<usize> = t.entries.iter().map(|e| e.candidate).collect();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), t.entries.len());
                // the best-feasible series never increases once defined
                let conv = t.convergence();
                for w in conv.windows(2) {
                    if let (Some(a), Some(b)) = (w[0], w[1]) {
                        assert!(b <= a);
                    }
                    assert!(!(w[0].is_some() && w[1].is_none()));
                }
            }
            assert!((0.0..=1.0).contains(&m.feasible_fraction));
        }
    }
}

#[test]
fn one_repetition_aggregate_equals_its_trace() {
    let cfg = RunConfig { repetitions: 1, ..small(ProblemName::P3, AcquisitionKind::Switching) };
    let (m, t) = run_monte_carlo(&cfg).unwrap();
    let t = &t[0];
    assert_eq!(m.mean_required_iterations, t.required_iterations as f64);
    let opt: Vec<_> = t.optimization_entries().collect();
    if !opt.is_empty() {
        let feasible = opt.iter().filter(|e| e.feasible).count();
        assert_eq!(m.feasible_fraction, feasible as f64 / opt.len() as f64);
    }
    let all = t.entries.iter().filter(|e| e.feasible).count() as f64 / t.entries.len() as f64;
    assert_eq!(m.feasible_fraction_with_init, all);
}

#[test]
fn zero_pi_reproduces_constrained_ei() {
    let base = RunConfig { repetitions: 2, ..small(ProblemName::P3, AcquisitionKind::Switching) };
    let sweep = pi_sweep(&base, &[0.0, 0.6]).unwrap();
    let strip = |ts: &[fipbo::bench::RunTrace]| -> Vec<Vec<usize>> {
        ts.iter().map(|t| t.entries.iter().map(|e| e.candidate).collect()).collect()
    };
    assert_eq!(strip(&sweep.points[0].1), strip(&sweep.eic.1));
    assert_eq!(default_pi_grid().len(), 11);
    assert!(pi_sweep(&base, &[1.5]).is_err());
}

#[test]
fn output_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { repetitions: 2, ..small(ProblemName::P1, AcquisitionKind::Switching) };
    let a = run_monte_carlo(&cfg).unwrap();
    let b = run_monte_carlo(&RunConfig { acquisition: AcquisitionKind::ConstrainedEi, ..cfg }).unwrap();
    write_outputs(dir.path(), &[a, b]).unwrap();
    let metrics: Vec<AggregateMetrics> =
        serde_json::from_reader(std::fs::File::open(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.len(), 2);
    let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(table.starts_with("metric,alg1(pi=0.6),eic\n"), "{table}");
    assert!(table.contains("required_iterations,") && table.contains("feasible_fraction,"));
    assert!(dir.path().join("convergence.csv").exists());
    assert!(std::fs::read_dir(dir.path().join("traces")).unwrap().count() >= 2);
}

#[test]
fn timing_probe_reports_every_size() {
    let t = timing_probe(ProblemName::P1, 500, &[5, 10], 3).unwrap();
    assert_eq!(t.iter().map(|s| s.dataset_size).collect::<Vec<_>>(), vec![5, 10]);
    assert!(t.iter().all(|s| s.samples_ms.len() == 3 && s.median_ms == median(&s.samples_ms)));
    assert_eq!(t[1].candidates, 490);
    assert!(timing_probe(ProblemName::P1, 0, &[10], 1).is_err());
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
}

#[test]
fn invalid_configs_are_rejected() {
    let ok = small(ProblemName::P1, AcquisitionKind::Switching);
    assert!(run_single(&RunConfig { init_count: 0, ..ok.clone() }, 0).is_err());
    assert!(run_single(&RunConfig { repetitions: 0, ..ok.clone() }, 0).is_err());
    assert!(run_single(&RunConfig { pi: 1.2, ..ok.clone() }, 0).is_err());
    assert!(run_single(&RunConfig { tau: -0.1, ..ok }, 0).is_err());
}
