use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("embedding count {0} is not a perfect square")]
    NotSquare(usize),

    #[error("dimension {0} is not divisible by 4")]
    BadDim(usize),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("non-finite weight at index {index}")]
    NonFiniteWeight { index: usize },

    #[error("malformed schema: {0}")]
    MalformedSchema(String),

    #[error("beta must be positive, got {0}")]
    BadBeta(f64),

    #[error("invalid log-probability: {0}")]
    BadLogProb(f64),

    #[error("invalid deployment config: {0}")]
    BadConfig(String),

    #[error("configuration space is empty")]
    EmptySpace,

    #[error("bad tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
