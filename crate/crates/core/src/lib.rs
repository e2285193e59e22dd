//! Constrained batch Bayesian optimization for problems with a known
//! deterministic cost and expensive black-box constraints.

pub mod acquisition;
pub mod batch;
pub mod bench;
pub mod calibration;
pub mod campaign;
pub mod candidates;
pub mod error;
pub mod gp;
pub mod problems;

pub use error::{Error, Result};
