use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution for action `{action}`: {reason}")]
    InvalidDistribution { action: String, reason: String },

    #[error("actions `{0}` and `{1}` induce the same signal distribution")]
    NotIdentified(String, String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("absolute continuity fails at signal index {0}")]
    AbsoluteContinuity(usize),

    #[error("score against the target action is degenerate")]
    DegenerateScore,

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("utility {value} lies outside the range of u")]
    OutsideUtilityRange { value: f64 },

    #[error("model assumption violated: {0}")]
    Assumption(String),

    #[error("{types} type classes exceed the enumeration cap {cap}; use Monte Carlo")]
    EnumerationCap { types: f64, cap: usize },

    #[error("n = {n} too small for this threshold: {detail}")]
    NTooSmall { n: usize, detail: String },

    #[error("threshold outside feasible band: {0}")]
    ThresholdOutsideBand(String),

    #[error("contract infeasible at n = {n}: {detail}")]
    ContractInfeasible { n: usize, detail: String },

    #[error("cost minimizer is not unique")]
    NonUniqueMinimizer,

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported alphabet: {0}")]
    UnsupportedAlphabet(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
