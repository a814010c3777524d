use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("operator too large for dense materialization: {rows}x{cols} exceeds cap of {cap} entries")]
    TooLarge { rows: usize, cols: usize, cap: usize },

    #[error("unsatisfiable condition: {0}")]
    UnsatisfiableCondition(String),

    #[error("non-finite value encountered at step t={step}")]
    NumericalAbort { step: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error (possibly wrapped in seed context) is a numerical abort.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalAbort { .. } => true,
            Error::Seed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
