use std::path::Path;

use fipbo::acquisition::{Branch, ConstraintSpec};
use fipbo::calibration::{GridAxis, GridSpec};
use fipbo::campaign::{
    acquire_lock, aps_config, campaign_fit, fdm_config, infeasible_init, load_session, replay, save_session,
    with_session, write_temp, CampaignConfig, Event, InitData, NamedConstraint, ObjectiveSpec, SessionState,
    SyntheticProcessOracle, Term,
};
use fipbo::batch::BatchConfig;

fn fdm_session(init_points: usize, seed: u64) -> (SessionState, SyntheticProcessOracle) {
    let oracle = SyntheticProcessOracle::fdm_like(seed);
    let mut inputs = Vec::new();
    let mut measurements = Vec::new();
    for i in 0..init_points {
        let x = vec![(i as f64 * 0.37 + 0.05) % 1.0, (i as f64 * 0.61 + 0.15) % 1.0];
        measurements.push(oracle.measure(&x, 0.0, 1000 + i as u64).outputs);
        inputs.push(x);
    }
    let config = fdm_config(Some(InitData { inputs, measurements }));
    let ds = config.initial_dataset(None).unwrap();
    (SessionState::init(config, ds).unwrap(), oracle)
}

/// Suggests, measures on the oracle, and records; returns the recorded values.
fn step(s: &mut SessionState, oracle: &SyntheticProcessOracle, counter: u64, pi: Option<f64>) -> Vec<Vec<f64>> {
    let batch = s.suggest(None, pi).unwrap().clone();
    let m: Vec<Vec<f64>> =
        batch.candidates.iter().enumerate().map(|(i, x)| oracle.measure(x, 0.0, counter + i as u64).outputs).collect();
    s.record(m.clone(), None).unwrap();
    m
}

#[test]
fn seven_initialization_experiments() {
    let (s, _) = fdm_session(7, 1);
    assert_eq!(s.dataset.len(), 7);
    assert_eq!(s.history.len(), 1);
    assert_eq!(s.status().evaluations, 7);
}

#[test]
fn replay_reconstructs_the_dataset_bit_exactly() {
    let (mut s, oracle) = fdm_session(7, 2);
    for k in 0..4 {
        step(&mut s, &oracle, 10 * k, None);
    }
    s.suggest(None, None).unwrap();
    s.abandon(Some("nozzle clogged".into())).unwrap();
    step(&mut s, &oracle, 90, Some(0.1));
    let r = replay(&s.config, &s.history).unwrap();
    assert_eq!(r, s);
    for (a, b) in r.dataset.inputs().iter().zip(s.dataset.inputs()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // the log alternates: no two suggestions without a record or abandon between them
    let kinds: Vec<&str> = s
        .history
        .iter()
        .map(|e| match e {
            Event::Suggest { .. } => "s",
            Event::Record { .. } | Event::Abandon { .. } => "r",
            _ => "-",
        })
        .collect();
    assert!(kinds.windows(2).all(|w| w != ["s", "s"]));
}

#[test]
fn alternation_errors() {
    let (mut s, _) = fdm_session(3, 3);
    assert!(s.record(vec![vec![1.0]], None).is_err());
    assert!(s.abandon(None).is_err());
    s.suggest(None, None).unwrap();
    let before = s.clone();
    let msg = s.suggest(None, None).unwrap_err().to_string();
    assert!(msg.contains("pending"), "{msg}");
    assert_eq!(s, before);
    assert!(s.record(vec![vec![f64::NAN]], None).is_err());
    assert!(s.record(vec![vec![1.0], vec![2.0]], None).is_err());
    assert_eq!(s, before, "failed commands leave the state untouched");
}

#[test]
fn pi_override_only_affects_future_suggestions() {
    let (mut s, oracle) = fdm_session(7, 4);
    step(&mut s, &oracle, 0, None);
    let data = s.dataset.clone();
    let incumbent = s.incumbent();
    s.suggest(None, Some(0.1)).unwrap();
    assert_eq!(s.dataset, data);
    assert_eq!(s.incumbent(), incumbent);
    assert_eq!(s.pi, 0.1);
    assert!(matches!(s.history.last(), Some(Event::Suggest { pi, .. }) if *pi == 0.1));
    s.abandon(None).unwrap();
    assert_eq!(s.pi, 0.1, "the override persists");
}

#[test]
fn status_is_read_only_and_idempotent() {
    let (mut s, oracle) = fdm_session(7, 5);
    step(&mut s, &oracle, 0, None);
    let before = s.clone();
    let a = s.status();
    let b = s.status();
    assert_eq!(a, b);
    assert_eq!(a.to_string(), b.to_string());
    assert_eq!(s, before);
    assert_eq!(a.last_batch_fips.as_ref().map(Vec::len), Some(1));
}

#[test]
fn persistence_survives_an_interrupted_write() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let (mut s, oracle) = fdm_session(7, 6);
    save_session(&path, &s).unwrap();
    assert_eq!(load_session(&path).unwrap(), s);
    let saved = s.clone();

    step(&mut s, &oracle, 0, None);
    // the process dies after writing the temp file, before the rename
    let tmp = write_temp(&path, &s).unwrap();
    assert!(tmp.exists());
    assert_eq!(load_session(&path).unwrap(), saved);
    // a later command overwrites the stale temp file and commits normally
    save_session(&path, &s).unwrap();
    assert_eq!(load_session(&path).unwrap(), s);
}

#[test]
fn one_writer_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let (s, _) = fdm_session(7, 7);
    save_session(&path, &s).unwrap();
    let lock = acquire_lock(&path).unwrap();
    assert!(acquire_lock(&path).is_err());
    let err = with_session(&path, |st| st.suggest(None, None).map(|_| ())).unwrap_err();
    assert!(err.to_string().contains("locked"), "{err}");
    assert_eq!(load_session(&path).unwrap(), s);
    drop(lock);
    with_session(&path, |st| st.suggest(None, None).map(|_| ())).unwrap();
    assert_eq!(load_session(&path).unwrap().status().pending, 1);
    assert!(!dir.path().join("session.json.lock").exists());
}

#[test]
fn empty_initialization_starts_on_the_no_feasible_branch() {
    let config = fdm_config(None);
    let ds = config.initial_dataset(None).unwrap();
    let mut s = SessionState::init(config, ds).unwrap();
    let st = s.status();
    assert_eq!((st.evaluations, st.incumbent.clone()), (0, None));
    let b = s.suggest(None, None).unwrap();
    assert_eq!(b.selection_branches, vec![Branch::NoFeasible]);
}

/// One-input campaign with costs 100, 120.3 and 140.6 on its three grid points.
fn three_point_config() -> CampaignConfig {
    CampaignConfig {
        name: "three".into(),
        description: String::new(),
        grid: GridSpec::new(vec![GridAxis { lower: 0.0, upper: 1.0, count: 3 }]),
        status: None,
        constraints: vec![NamedConstraint { name: "q".into(), spec: ConstraintSpec::upper(1.0) }],
        objective: ObjectiveSpec {
            label: "cost".into(),
            intercept: 100.0,
            terms: vec![Term { input: 0, coefficient: 40.6, exponent: 1.0, shift: 0.0 }],
        },
        batch: BatchConfig { batch_size: 1, pi: 0.4, ..BatchConfig::default() },
        fit: campaign_fit(),
        init: Some(InitData { inputs: vec![vec![0.0], vec![1.0]], measurements: vec![vec![3.0], vec![0.0]] }),
        init_csv: None,
        append_baseline: true,
    }
}

#[test]
fn feasible_record_updates_the_incumbent() {
    let config = three_point_config();
    let ds = config.initial_dataset(None).unwrap();
    let mut s = SessionState::init(config, ds).unwrap();
    assert_eq!(s.incumbent().unwrap().cost, 140.6);
    let b = s.suggest(None, None).unwrap();
    assert_eq!(b.candidates, vec![vec![0.5]]);
    let out = s.record(vec![vec![0.2]], None).unwrap();
    let inc = out.incumbent.unwrap();
    assert!((inc.cost - 120.3).abs() < 1e-12);
    assert_eq!(inc.input, vec![0.5]);
    assert_eq!(out.feasible_in_batch, 1);
}

#[test]
fn infeasible_record_keeps_the_incumbent() {
    let config = three_point_config();
    let ds = config.initial_dataset(None).unwrap();
    let mut s = SessionState::init(config, ds).unwrap();
    s.suggest(None, None).unwrap();
    let out = s.record(vec![vec![2.5]], None).unwrap();
    assert_eq!(out.incumbent.unwrap().cost, 140.6);
    assert_eq!(out.feasible_in_batch, 0);
}

#[test]
fn aps_like_campaign_session() {
    let oracle = SyntheticProcessOracle::aps_like(0);
    let init = infeasible_init(&oracle, &aps_config(None).specs(), 86, 0);
    let config = aps_config(Some(init.clone()));
    let ds = config.initial_dataset(Some(Path::new("."))).unwrap();
    let mut s = SessionState::init(config, ds).unwrap();
    assert_eq!(s.dataset.len(), 86);
    assert!(s.incumbent().is_none());
    assert!(s.suggest(None, None).is_err(), "status modelling requires calibration first");

    let xb = init.inputs[0][..6].to_vec();
    let baseline = oracle.measure(&xb, 2.0, 0);
    let delta = s.calibrate(&xb, baseline.status.unwrap(), Some(baseline.outputs.clone()), false).unwrap().delta;
    assert!((delta - 2.0).abs() < 0.5, "offset {delta}");
    assert_eq!(s.dataset.len(), 87, "the calibration experiment is kept as data");

    let b = s.suggest(None, None).unwrap().clone();
    assert_eq!(b.len(), 5);
    assert_eq!(b.selection_fips.len(), 5);
    assert!(b.selection_branches.iter().all(|&br| br == Branch::NoFeasible));
    let mut ids = b.candidate_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 5);
    assert!(s.calibrate(&xb, 40.0, None, false).is_err(), "no calibration with a pending batch");

    let m: Vec<Vec<f64>> = b.candidates.iter().map(|x| oracle.measure(&x[..6], 2.0, 1).outputs).collect();
    assert!(s.record(m[..4].to_vec(), None).is_err());
    s.record(m, None).unwrap();
    assert_eq!(s.dataset.len(), 92);
    assert_eq!(replay(&s.config, &s.history).unwrap().dataset, s.dataset);
}
