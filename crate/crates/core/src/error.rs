use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("target index set is empty")]
    EmptyTarget,

    #[error("scenario effects are required but absent")]
    MissingScenario,

    #[error("infeasible allocation: {0}")]
    InfeasibleAllocation(String),

    #[error("no patients in requested scope: {0}")]
    EmptyCell(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("invalid interval ({lower}, {upper})")]
    InvalidInterval { lower: f64, upper: f64 },

    #[error("selection event is not an interval in the target's stage-1 mean: {0}")]
    NotIntervalRepresentable(String),

    #[error("target {target} is not contained in the selected set {selected}")]
    TargetNotSelected { target: String, selected: String },

    #[error("trial stopped for futility at the interim; no estimate is defined")]
    NoEstimateAfterStop,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("quadrature did not converge: {0}")]
    ConvergenceFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rule {rule} failed partition consistency: {detail}")]
    InconsistentRule { rule: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
