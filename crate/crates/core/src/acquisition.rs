//! Improvement, feasibility probability and the switching candidate-selection rule.
//!
//! With a known deterministic cost `S(x)`, the improvement of a candidate over
//! the incumbent is exact, so the only uncertain quantity is whether the
//! constraints hold. Two scores are built from it:
//!
//! * `alpha_fip = FP * sgn(I)`: probability of being feasible, restricted to
//!   candidates that would lower the cost;
//! * `alpha_hfi = (FP - pi) * I`: improvement weighted by the feasibility
//!   margin above the confidence threshold `pi`.
//!
//! [`select_candidate`] maximizes `alpha_fip` until a feasible point is known,
//! and afterwards switches to `alpha_hfi` whenever some candidate has
//! `alpha_fip > pi`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidatePool, Objective};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpModel, PosteriorPrediction};

/// Feasibility window for one constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// `c(x) <= upper`
    Upper { upper: f64 },
    /// `lower <= c(x) <= upper`
    Interval { lower: f64, upper: f64 },
}

impl ConstraintSpec {
    pub fn upper(upper: f64) -> Self {
        Self::Upper { upper }
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        let spec = Self::Interval { lower, upper };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Upper { upper } if upper.is_finite() => Ok(()),
            Self::Interval { lower, upper } if lower.is_finite() && upper.is_finite() && lower < upper => Ok(()),
            _ => Err(Error::InvalidParameter(format!("invalid constraint window {self:?}"))),
        }
    }

    pub fn is_satisfied(&self, value: f64) -> bool {
        match *self {
            Self::Upper { upper } => value <= upper,
            Self::Interval { lower, upper } => lower <= value && value <= upper,
        }
    }

    /// Probability that a Gaussian latent value lies inside the window.
    pub fn probability(&self, prediction: &PosteriorPrediction) -> f64 {
        let sd = prediction.std_dev();
        match *self {
            Self::Upper { upper } => normal_cdf((upper - prediction.mean) / sd),
            Self::Interval { lower, upper } => {
                let p = normal_cdf((upper - prediction.mean) / sd) - normal_cdf((lower - prediction.mean) / sd);
                p.clamp(0.0, 1.0)
            }
        }
    }
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// True when every measured constraint value lies in its window.
pub fn is_feasible(measurement: &[f64], specs: &[ConstraintSpec]) -> bool {
    measurement.len() == specs.len() && measurement.iter().zip(specs).all(|(v, s)| s.is_satisfied(*v))
}

/// Feasibility of every stored point, judged on the measured values.
pub fn dataset_feasibility(dataset: &Dataset, specs: &[ConstraintSpec]) -> Vec<bool> {
    (0..dataset.len()).map(|i| is_feasible(&dataset.measurement(i), specs)).collect()
}

/// Best feasible cost found so far, or the fallback when none is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub best_feasible_cost: f64,
    pub best_feasible_input: Option<Vec<f64>>,
    pub fallback_cost: f64,
}

impl Incumbent {
    /// `max_candidate_cost` is the largest cost over the candidate set; the
    /// fallback is one above the largest cost over candidates and evaluated points.
    pub fn compute(
        dataset: &Dataset,
        specs: &[ConstraintSpec],
        objective: &dyn Objective,
        max_candidate_cost: f64,
    ) -> Self {
        let mut max_cost = max_candidate_cost;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..dataset.len() {
            let cost = objective.cost(dataset.input(i));
            max_cost = max_cost.max(cost);
            if is_feasible(&dataset.measurement(i), specs) && best.is_none_or(|(b, _)| cost < b) {
                best = Some((cost, i));
            }
        }
        let fallback_cost = max_cost + 1.0;
        match best {
            Some((cost, i)) => Self {
                best_feasible_cost: cost,
                best_feasible_input: Some(dataset.input(i).to_vec()),
                fallback_cost,
            },
            None => Self { best_feasible_cost: fallback_cost, best_feasible_input: None, fallback_cost },
        }
    }

    pub fn has_feasible(&self) -> bool {
        self.best_feasible_input.is_some()
    }
}

pub fn improvement(candidate_cost: f64, incumbent: &Incumbent) -> f64 {
    (incumbent.best_feasible_cost - candidate_cost).max(0.0)
}

/// Product of per-constraint window probabilities (independent constraints).
pub fn feasibility_probability(predictions: &[PosteriorPrediction], specs: &[ConstraintSpec]) -> f64 {
    predictions.iter().zip(specs).map(|(p, s)| s.probability(p)).product()
}

pub fn alpha_fip(fp: f64, improvement: f64) -> f64 {
    if improvement > 0.0 {
        fp
    } else {
        0.0
    }
}

pub fn alpha_hfi(fp: f64, improvement: f64, pi: f64) -> f64 {
    (fp - pi) * improvement
}

pub fn alpha_eic(fp: f64, improvement: f64) -> f64 {
    fp * improvement
}

/// Which candidates get a posterior evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// Every active candidate.
    Full,
    /// Only candidates with positive improvement. The others score zero on
    /// every acquisition and carry `NaN` feasibility.
    ImprovingOnly,
}

/// Per-candidate acquisition quantities over the active candidate set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionScores {
    pub candidate_ids: Vec<usize>,
    pub cost: Vec<f64>,
    pub improvement: Vec<f64>,
    pub feasibility: Vec<f64>,
    pub alpha_fip: Vec<f64>,
    pub alpha_hfi: Vec<f64>,
    pub alpha_eic: Vec<f64>,
    pub pi: f64,
}

impl AcquisitionScores {
    /// Builds scores from precomputed feasibility probabilities and improvements.
    ///
    /// Candidates without improvement score exactly zero on every acquisition,
    /// whether or not their feasibility was evaluated.
    pub fn from_parts(candidate_ids: Vec<usize>, cost: Vec<f64>, feasibility: Vec<f64>, improvement: Vec<f64>, pi: f64) -> Self {
        let zip = || feasibility.iter().zip(&improvement);
        let gated = |i: f64, v: f64| if i > 0.0 { v } else { 0.0 };
        let alpha_fip = zip().map(|(&f, &i)| gated(i, alpha_fip(f, i))).collect();
        let alpha_hfi = zip().map(|(&f, &i)| gated(i, alpha_hfi(f, i, pi))).collect();
        let alpha_eic = zip().map(|(&f, &i)| gated(i, alpha_eic(f, i))).collect();
        Self { candidate_ids, cost, improvement, feasibility, alpha_fip, alpha_hfi, alpha_eic, pi }
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    pub fn position_of(&self, candidate_id: usize) -> Option<usize> {
        self.candidate_ids.binary_search(&candidate_id).ok()
    }

    /// Writes `candidate_id,S,I,FP,alpha_fip,alpha_hfi,alpha_eic,branch`.
    pub fn write_csv<W: Write>(&self, writer: W, branch: Branch) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["candidate_id", "S", "I", "FP", "alpha_fip", "alpha_hfi", "alpha_eic", "branch"])?;
        for p in 0..self.len() {
            w.write_record([
                self.candidate_ids[p].to_string(),
                self.cost[p].to_string(),
                self.improvement[p].to_string(),
                self.feasibility[p].to_string(),
                self.alpha_fip[p].to_string(),
                self.alpha_hfi[p].to_string(),
                self.alpha_eic[p].to_string(),
                branch.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every active candidate of `pool` under one GP per constraint.
pub fn score_candidates(
    models: &[GpModel],
    specs: &[ConstraintSpec],
    pool: &CandidatePool,
    incumbent: &Incumbent,
    pi: f64,
    mode: ScoreMode,
) -> Result<AcquisitionScores> {
    if models.len() != specs.len() {
        return Err(Error::MeasurementMismatch { expected: specs.len(), got: models.len() });
    }
    let ids = pool.remaining().to_vec();
    let cost: Vec<f64> = ids.iter().map(|&i| pool.costs().value(i)).collect();
    let improvement: Vec<f64> = cost.iter().map(|&c| improvement(c, incumbent)).collect();
    let dims = pool.set().dims();
    if let Some(m) = models.iter().find(|m| m.dims() != dims) {
        return Err(Error::DimensionMismatch { expected: m.dims(), got: dims });
    }
    let feasibility: Vec<f64> = ids
        .par_iter()
        .zip(improvement.par_iter())
        .map(|(&id, &imp)| {
            if mode == ScoreMode::ImprovingOnly && imp <= 0.0 {
                return f64::NAN;
            }
            let x = pool.set().point(id);
            models
                .iter()
                .zip(specs)
                .map(|(m, s)| {
                    // dimensions were checked above
                    let p = m.predict(x).expect("dimension checked");
                    s.probability(&p)
                })
                .product()
        })
        .collect();
    Ok(AcquisitionScores::from_parts(ids, cost, feasibility, improvement, pi))
}

/// Which rule produced a selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// No evaluated point is feasible: maximize `alpha_fip`.
    NoFeasible,
    /// Some candidate has `alpha_fip > pi`: maximize `alpha_hfi`.
    HighConfidence,
    /// A feasible point is known but no candidate clears `pi`: maximize `alpha_fip`.
    LowConfidence,
    /// Constrained expected improvement baseline.
    ConstrainedEi,
}

impl Branch {
    pub fn label(&self) -> &'static str {
        match self {
            Branch::NoFeasible => "fip_no_feasible",
            Branch::HighConfidence => "hfi",
            Branch::LowConfidence => "fip_low_confidence",
            Branch::ConstrainedEi => "eic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Position inside the scored arrays.
    pub position: usize,
    pub candidate_id: usize,
    pub branch: Branch,
}

/// First position holding the maximum; `NaN` never wins.
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None if !v.is_nan() => best = Some((i, v)),
            Some((_, b)) if v > b => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|(i, _)| i)
}

/// Switching selection over the scored candidates.
///
/// `dataset_feasibility` flags which evaluated points satisfy every
/// constraint; ties resolve to the lowest candidate index.
pub fn select_candidate(scores: &AcquisitionScores, dataset_feasibility: &[bool], pi: f64) -> Result<Selection> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let (values, branch) = if !dataset_feasibility.iter().any(|&f| f) {
        (&scores.alpha_fip, Branch::NoFeasible)
    } else if scores.alpha_fip.iter().any(|&a| a > pi) {
        if pi == scores.pi {
            (&scores.alpha_hfi, Branch::HighConfidence)
        } else {
            return select_candidate(&rescore(scores, pi), dataset_feasibility, pi);
        }
    } else {
        (&scores.alpha_fip, Branch::LowConfidence)
    };
    let position = argmax(values).unwrap_or(0);
    Ok(Selection { position, candidate_id: scores.candidate_ids[position], branch })
}

fn rescore(scores: &AcquisitionScores, pi: f64) -> AcquisitionScores {
    AcquisitionScores::from_parts(
        scores.candidate_ids.clone(),
        scores.cost.clone(),
        scores.feasibility.clone(),
        scores.improvement.clone(),
        pi,
    )
}

/// Constrained expected improvement with a known objective: `FP * I`.
///
/// While no feasible point is known the rule maximizes the feasibility
/// probability of improving candidates, as the switching rule does.
pub fn select_constrained_ei(scores: &AcquisitionScores, dataset_feasibility: &[bool]) -> Result<Selection> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let values = if dataset_feasibility.iter().any(|&f| f) { &scores.alpha_eic } else { &scores.alpha_fip };
    let position = argmax(values).unwrap_or(0);
    Ok(Selection { position, candidate_id: scores.candidate_ids[position], branch: Branch::ConstrainedEi })
}

/// Acquisition rule used by the optimization loops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AcquisitionRule {
    Switching { pi: f64 },
    ConstrainedEi,
}

impl AcquisitionRule {
    pub fn pi(&self) -> f64 {
        match *self {
            Self::Switching { pi } => pi,
            Self::ConstrainedEi => 0.0,
        }
    }

    pub fn select(&self, scores: &AcquisitionScores, dataset_feasibility: &[bool]) -> Result<Selection> {
        match *self {
            Self::Switching { pi } => select_candidate(scores, dataset_feasibility, pi),
            Self::ConstrainedEi => select_constrained_ei(scores, dataset_feasibility),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(fp: &[f64], imp: &[f64], pi: f64) -> AcquisitionScores {
        let n = fp.len();
        AcquisitionScores::from_parts((0..n).collect(), vec![0.0; n], fp.to_vec(), imp.to_vec(), pi)
    }

    fn inc(cost: f64, feasible: bool) -> Incumbent {
        Incumbent {
            best_feasible_cost: cost,
            best_feasible_input: feasible.then(|| vec![0.0]),
            fallback_cost: cost,
        }
    }

    #[test]
    fn improvement_cases() {
        assert_eq!(improvement(3.0, &inc(5.0, true)), 2.0);
        assert_eq!(improvement(7.0, &inc(5.0, true)), 0.0);
    }

    #[test]
    fn fallback_incumbent_is_max_plus_one() {
        let ds = Dataset::new(1, 1).unwrap();
        let obj = |x: &[f64]| x[0];
        let incumbent = Incumbent::compute(&ds, &[ConstraintSpec::upper(0.0)], &obj, 10.0);
        assert_eq!(incumbent.fallback_cost, 11.0);
        assert_eq!(incumbent.best_feasible_cost, 11.0);
        assert!(!incumbent.has_feasible());
        assert_eq!(improvement(3.0, &incumbent), 8.0);
    }

    #[test]
    fn incumbent_uses_measured_feasibility() {
        let ds = Dataset::from_rows(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![0.5], vec![-0.1], vec![-2.0]],
        )
        .unwrap();
        let obj = |x: &[f64]| x[0] * 10.0;
        let incumbent = Incumbent::compute(&ds, &[ConstraintSpec::upper(0.0)], &obj, 5.0);
        assert_eq!(incumbent.best_feasible_cost, 20.0);
        assert_eq!(incumbent.best_feasible_input, Some(vec![2.0]));
        assert_eq!(incumbent.fallback_cost, 31.0);
    }

    #[test]
    fn feasibility_probability_cases() {
        let p = |mean, variance| PosteriorPrediction { mean, variance };
        let one_sided = ConstraintSpec::upper(0.7);
        assert_eq!(feasibility_probability(&[p(0.7, 3.0)], &[one_sided]), 0.5);
        let fp = feasibility_probability(&[p(0.0, 1.0)], &[ConstraintSpec::upper(1.959964)]);
        assert!((fp - 0.975).abs() < 1e-4);
        let two = feasibility_probability(&[p(1.0, 1.0), p(-2.0, 4.0)], &[ConstraintSpec::upper(1.0), ConstraintSpec::upper(-2.0)]);
        assert!((two - 0.25).abs() < 1e-15);
        let window = ConstraintSpec::interval(-1.0, 1.0).unwrap();
        assert!((feasibility_probability(&[p(0.0, 1.0)], &[window]) - 0.6827).abs() < 1e-3);
    }

    #[test]
    fn acquisition_function_cases() {
        assert_eq!(alpha_fip(0.8, 2.5), 0.8);
        assert_eq!(alpha_fip(0.8, 0.0), 0.0);
        assert_eq!(alpha_fip(0.0, 3.0), 0.0);
        assert!((alpha_hfi(0.7, 2.0, 0.6) - 0.2).abs() < 1e-12);
        assert!((alpha_hfi(0.5, 2.0, 0.6) + 0.2).abs() < 1e-12);
        assert_eq!(alpha_hfi(1.0, 0.0, 0.0), 0.0);
        assert_eq!(alpha_eic(0.5, 4.0), 2.0);
        assert_eq!(alpha_eic(0.0, 9.0), 0.0);
        assert_eq!(alpha_eic(0.37, 1.9), alpha_hfi(0.37, 1.9, 0.0));
    }

    #[test]
    fn interval_spec_requires_ordered_bounds() {
        assert!(ConstraintSpec::interval(1.0, 1.0).is_err());
        assert!(ConstraintSpec::interval(2.0, 1.0).is_err());
    }

    #[test]
    fn hand_traced_selection() {
        let s = scores(&[0.9, 0.4], &[1.0, 2.0], 0.6);
        let sel = select_candidate(&s, &[false, false], 0.6).unwrap();
        assert_eq!((sel.candidate_id, sel.branch), (0, Branch::NoFeasible));

        let s = scores(&[0.7, 0.5], &[1.0, 2.0], 0.6);
        let sel = select_candidate(&s, &[true], 0.6).unwrap();
        assert_eq!((sel.candidate_id, sel.branch), (0, Branch::HighConfidence));

        let s = scores(&[0.55, 0.5], &[1.0, 2.0], 0.6);
        let sel = select_candidate(&s, &[true], 0.6).unwrap();
        assert_eq!((sel.candidate_id, sel.branch), (0, Branch::LowConfidence));
    }

    #[test]
    fn ties_break_to_lowest_index_and_empty_errors() {
        let s = scores(&[0.3, 0.3, 0.3], &[1.0, 1.0, 1.0], 0.5);
        assert_eq!(select_candidate(&s, &[true], 0.5).unwrap().candidate_id, 0);
        let empty = scores(&[], &[], 0.5);
        assert!(matches!(select_candidate(&empty, &[true], 0.5), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn selection_with_mismatched_pi_rescores() {
        let s = scores(&[0.7, 0.95], &[3.0, 1.0], 0.0);
        // at pi = 0.6: hfi = [0.3, 0.35]
        let sel = select_candidate(&s, &[true], 0.6).unwrap();
        assert_eq!(sel.candidate_id, 1);
    }

    #[test]
    fn scores_csv_layout() {
        let s = scores(&[0.5], &[1.0], 0.2);
        let mut buf = Vec::new();
        s.write_csv(&mut buf, Branch::HighConfidence).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("candidate_id,S,I,FP,alpha_fip,alpha_hfi,alpha_eic,branch\n"));
        assert!(text.contains(",hfi"));
    }
}
