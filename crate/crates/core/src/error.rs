use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("negative entry {value} at ({row}, {col}) in a nonnegative matrix")]
    Negative { row: usize, col: usize, value: f64 },

    #[error("restricted system for {axis} {index} is singular")]
    Singular { axis: &'static str, index: usize },

    #[error("solver diverged at iteration {iter}: objective {objective}")]
    Divergence { iter: usize, objective: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("formula regime violated: {0}")]
    Regime(String),

    #[error("no threshold found up to l = {0}")]
    NotFound(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io(_) | Error::Parse(_) => 2,
            Error::Singular { .. } | Error::Divergence { .. } => 3,
            Error::Regime(_) | Error::NotFound(_) | Error::InvalidParam(_) => 4,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Negative { .. } => 2,
        }
    }
}
