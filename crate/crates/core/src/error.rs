use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("underdetermined task: {examples} examples for dimension {dim}")]
    Underdetermined { examples: usize, dim: usize },

    #[error("example index {index} out of range (task has {len} examples)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("infeasible commit rate: interval {interval} s does not exceed overhead {overhead} s for worker {worker}")]
    InfeasibleRate { worker: usize, interval: f64, overhead: f64 },

    #[error("commit target {target} must exceed every worker's commit count (max {max_commits})")]
    TargetTooSmall { target: u64, max_commits: u64 },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("curve fit failed: {0}")]
    FitFailure(String),

    #[error("reference loss {loss} is unreachable under the fitted curve")]
    UnreachableLoss { loss: f64 },

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("search budget exceeded: {0}")]
    Budget(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("task format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
