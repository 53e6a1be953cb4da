use thiserror::Error;

/// Crate-wide error type.
///
/// `Domain` marks mathematically invalid inputs (poles, nonintegrable tails,
/// out-of-range parameters). `Validation` marks ill-formed run configuration.
/// `Numerical` marks runtime numerical failures (non-convergence, factorization
/// breakdown, excessive failed trials).
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
