use thiserror::Error;

/// Failures raised by the assimilation kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite state produced at step {step}")]
    Divergence { step: usize },
    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("block {block} is not positive definite")]
    NotPositiveDefinite { block: usize },
    #[error("capacitance matrix of the low-rank update is singular")]
    SingularUpdate,
    #[error("tangent frame lost rank at step {step}")]
    FrameRank { step: usize },
    #[error("synchronization diverged at step {step}")]
    SyncDivergence { step: usize },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("parameters are not identifiable from the data")]
    ParameterUnidentifiable,
}

impl Error {
    /// Re-labels a step-indexed failure with the caller's time index.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::Divergence { .. } => Error::Divergence { step },
            Error::SyncDivergence { .. } => Error::SyncDivergence { step },
            Error::FrameRank { .. } | Error::RankDeficient { .. } => Error::FrameRank { step },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
