use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on caller-supplied data was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A geometric containment or safety check failed.
    #[error("geometry: {0}")]
    Geometry(String),
    /// A linear solve or quadrature failed to converge / stay conditioned.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
