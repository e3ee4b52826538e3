use thiserror::Error;

/// Errors raised by the estimator, the analysis routines and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(String),

    #[error("non-sequential batch: expected t = {expected}, got t = {got}")]
    NonSequential { expected: u64, got: u64 },

    #[error("ensemble member {member} has numerical rank 0")]
    RankDeficient { member: usize },

    #[error("infeasible sequence policy: {0}")]
    Infeasible(String),

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Strips any [`Error::AtStep`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NotPositiveDefinite(_) | Error::RankDeficient { .. } | Error::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
