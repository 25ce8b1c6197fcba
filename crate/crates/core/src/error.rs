use thiserror::Error;

/// Errors produced anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate distribution: total weight on active ports is {0}")]
    DegenerateDistribution(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("phase target unreachable within the current range for shifters {0:?}")]
    UnreachablePhase(Vec<usize>),

    #[error("matrix is not Hermitian (deviation {0:e})")]
    NotHermitian(f64),

    #[error("measurement design spans {rank} of {needed} operator directions")]
    DeficientDesign { rank: usize, needed: usize },

    #[error("spec fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidMesh(_)
            | Error::DimensionMismatch { .. }
            | Error::FingerprintMismatch { .. } => ErrorClass::Config,
            Error::Parse { .. } | Error::Io(_) | Error::Json(_) => ErrorClass::Io,
            Error::DegenerateDistribution(_)
            | Error::NonFinite(_)
            | Error::UnreachablePhase(_)
            | Error::NotHermitian(_)
            | Error::DeficientDesign { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
