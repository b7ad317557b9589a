use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("value {value} outside [0, 1]")]
    OutOfUnitInterval { value: f64 },

    #[error("quadratic program is infeasible: {0}")]
    Infeasible(String),

    #[error("quadratic program is unbounded (objective matrix not positive definite)")]
    Unbounded,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("conditioning argument: {0}")]
    Conditioning(String),

    #[error("non-monotone conditional distribution at given={given}")]
    NonMonotone { given: f64 },

    #[error("fit failed on edge {edge}: {source}")]
    EdgeFit {
        edge: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed csv at line {line}: {message} (row: {row:?})")]
    Csv {
        line: usize,
        message: String,
        row: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
