use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dimension {dim} out of range for rank {rank}")]
    DimOutOfRange { dim: usize, rank: usize },
    #[error("invalid permutation: {0}")]
    Permutation(String),
    #[error("matrix is singular (condition estimate {cond:e})")]
    Singular { cond: f64 },
    #[error("matrix is not Hermitian positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("backward already ran on this graph; call reset() first")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("pattern schedule violates coverage condition: {0}")]
    Coverage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
