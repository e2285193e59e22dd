//! Finite candidate sets and their known objective values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A deterministic, freely computable cost `S(x)`.
pub trait Objective: Send + Sync {
    fn cost(&self, x: &[f64]) -> f64;

    /// Human-readable identification of the closed form.
    fn describe(&self) -> String {
        "objective".to_string()
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn cost(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Unevaluated input vectors indexed by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    dims: usize,
    points: Vec<Vec<f64>>,
}

impl CandidateSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dims = points.first().map_or(0, Vec::len);
        if let Some(p) = points.iter().find(|p| p.len() != dims) {
            return Err(Error::DimensionMismatch { expected: dims, got: p.len() });
        }
        Ok(Self { dims, points })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec<f64>> {
        self.points
    }
}

/// Objective values of every candidate in a [`CandidateSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTable {
    values: Vec<f64>,
    provenance: String,
}

impl ObjectiveTable {
    pub fn compute(candidates: &CandidateSet, objective: &dyn Objective) -> Result<Self> {
        let values: Vec<f64> = candidates.points().iter().map(|p| objective.cost(p)).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "objective is not finite at candidate {i} ({:?})",
                candidates.point(i)
            )));
        }
        Ok(Self { values, provenance: objective.describe() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The active candidate set: a [`CandidateSet`], its objective table, and the
/// ascending list of candidate indices not yet selected.
///
/// The set and table are shared, so cloning a pool copies only the index list.
#[derive(Clone, Debug)]
pub struct CandidatePool {
    set: Arc<CandidateSet>,
    costs: Arc<ObjectiveTable>,
    remaining: Vec<usize>,
}

impl CandidatePool {
    pub fn new(set: CandidateSet, objective: &dyn Objective) -> Result<Self> {
        let costs = ObjectiveTable::compute(&set, objective)?;
        Ok(Self::with_table(set, costs))
    }

    pub fn with_table(set: CandidateSet, costs: ObjectiveTable) -> Self {
        let remaining = (0..set.len()).collect();
        Self { set: Arc::new(set), costs: Arc::new(costs), remaining }
    }

    pub fn set(&self) -> &CandidateSet {
        &self.set
    }

    pub fn costs(&self) -> &ObjectiveTable {
        &self.costs
    }

    pub fn remaining(&self) -> &[usize] {
        &self.remaining
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.remaining.binary_search(&id).is_ok()
    }

    /// Removes candidates from the active set; unknown ids are ignored.
    pub fn remove(&mut self, ids: &[usize]) {
        self.remaining.retain(|i| !ids.contains(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_removal_keeps_order() {
        let set = CandidateSet::new((0..5).map(|i| vec![i as f64]).collect()).unwrap();
        let mut pool = CandidatePool::new(set, &|x: &[f64]| x[0] * 2.0).unwrap();
        pool.remove(&[3, 1]);
        assert_eq!(pool.remaining(), &[0, 2, 4]);
        assert!(!pool.contains(1));
        assert_eq!(pool.costs().value(4), 8.0);
        assert_eq!(pool.costs().max(), 8.0);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let set = CandidateSet::new(vec![vec![0.0], vec![1.0]]).unwrap();
        assert!(CandidatePool::new(set, &|x: &[f64]| 1.0 / x[0]).is_err());
    }

    #[test]
    fn ragged_candidates_are_rejected() {
        assert!(CandidateSet::new(vec![vec![0.0], vec![1.0, 2.0]]).is_err());
    }
}
