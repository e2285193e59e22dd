use thiserror::Error;

/// Errors produced by the optimization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("ill-conditioned kernel: factorization failed with jitter up to {max_jitter:e}")]
    IllConditioned { max_jitter: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("measurement count mismatch: expected {expected}, got {got}")]
    MeasurementMismatch { expected: usize, got: usize },

    #[error("point {0:?} lies outside the problem domain")]
    OutOfDomain(Vec<f64>),

    #[error("no feasible grid point")]
    NoFeasibleGridPoint,

    #[error("grid of {required} points exceeds the candidate cap of {cap}; raise the cap to at least {required}")]
    GridTooLarge { required: usize, cap: usize },

    #[error("campaign: {0}")]
    Campaign(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
