use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not a valid density matrix: {0}")]
    InvalidState(String),

    #[error("truncation at dim {dim} discards {tail:.3e} of the population (limit {limit:.3e})")]
    TruncationTail { dim: usize, tail: f64, limit: f64 },

    #[error("unstable step size dt = {dt:.3e} s; use dt <= {suggested:.3e} s")]
    UnstableStep { dt: f64, suggested: f64 },

    #[error("zero variance in calibration reference set")]
    ZeroVariance,

    #[error("sampling radius {radius} encloses only {mass:.5} of the Q mass; need radius >= {required:.3}")]
    RadiusTooSmall { radius: f64, mass: f64, required: f64 },

    #[error("outcome {index} has non-positive probability {probability:.3e} under the current state")]
    DegenerateSupport { index: usize, probability: f64 },

    #[error("log-likelihood is not finite")]
    NonFiniteLikelihood,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("input basis is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularBasis { condition: f64 },

    #[error("infeasible model parameters: {0}")]
    Infeasible(String),

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("too few values: need at least {needed}, got {got}")]
    TooFewValues { needed: usize, got: usize },

    #[error("fixture {name} checksum mismatch")]
    ChecksumMismatch { name: String },

    #[error("unknown fixture {0}")]
    UnknownFixture(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
