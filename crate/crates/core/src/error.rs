use thiserror::Error;

/// Errors raised by the estimators, the simulation harness and the file readers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error("invalid 2x2 table: {0}")]
    InvalidTable(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("too few studies: {k} retained, at least 2 required")]
    TooFewStudies { k: usize },

    #[error("proportion outside (0, 1): {0}")]
    Domain(f64),

    #[error("bootstrap moment provider needs at least 100 resamples, got {0}")]
    BootstrapFailure(usize),

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("the corrected moments need the 2x2 counts behind every study")]
    MissingCounts,

    #[error("unequal size scheme needs k to be a multiple of 5, got {0}")]
    UnsupportedK(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("no usable replicates for {0}")]
    EmptyCell(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MetaError {
    fn from(e: std::io::Error) -> Self {
        MetaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MetaError>;
