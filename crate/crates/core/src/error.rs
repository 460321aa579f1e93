use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::Matching;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,

    #[error("empty view: no valid depth returns")]
    EmptyView,

    #[error("size mismatch: {left} vs {right} points")]
    SizeMismatch { left: usize, right: usize },

    #[error("problem too large for exact solver: n = {n} > {max}")]
    TooLarge { n: usize, max: usize },

    #[error("approximate assignment did not converge (best cost {:.6})", best.cost)]
    ApproxFailure { best: Box<Matching> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by op #{op} ({kind})")]
    Numerical { op: usize, kind: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed binary file: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::ConfigMismatch(_)
            | Error::InvalidInput(_)
            | Error::Shape(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::EmptyView => 3,
            Error::Numerical { .. } | Error::ApproxFailure { .. } | Error::DegenerateCloud => 4,
            Error::SizeMismatch { .. } | Error::TooLarge { .. } => 2,
        }
    }
}
