use thiserror::Error;

/// Errors raised by mesh construction, geometry, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (ranks, shapes, flags, missing tables).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid data (labels out of range, NaN input, non-positive weights).
    #[error("data error: {0}")]
    Data(String),
    /// An operation was called outside its documented domain.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Geometric construction failed (degenerate triangles, empty rings).
    #[error("construction error: {0}")]
    Construction(String),
    /// Malformed container or manifest.
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite loss or gradient during training.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for data problems and 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Precondition(_) | Error::Construction(_) | Error::Numerical(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
