use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("window out of range: offset {offset} + width {width} exceeds {available} columns")]
    Range {
        offset: usize,
        width: usize,
        available: usize,
    },

    #[error("{0} out of range")]
    OutOfRange(String),

    #[error("SVD of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    Numerical {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("rotate basis exhausted at round {round}: needs {needed} singular directions, only {available} available")]
    CapacityExhausted {
        round: usize,
        needed: usize,
        available: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite {what} in round {round}")]
    NonFinite { what: &'static str, round: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
