use thiserror::Error;

/// Errors raised by the library. Every variant maps to a precondition or
/// numerical failure that callers (and the CLI) report as a structured error.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: String, got: String },
    #[error("invalid algebra: {0}")]
    InvalidAlgebra(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("calibration failure: {0}")]
    Calibration(String),
    #[error("degenerate point: {0}")]
    Degenerate(String),
    #[error("not enough usable quadrature nodes: {0}")]
    Quadrature(String),
    #[error("divergent integrand: {0}")]
    Divergent(String),
    #[error("non-horizontal curve: residual {0:e}")]
    NonHorizontal(f64),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("map not contact at point: {0}")]
    NotContact(String),
    #[error("point on branch locus: {0}")]
    BranchLocus(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
}

impl Error {
    /// Short machine-readable tag used in structured error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidAlgebra(_) => "invalid_algebra",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Calibration(_) => "calibration",
            Error::Degenerate(_) => "degenerate",
            Error::Quadrature(_) => "quadrature",
            Error::Divergent(_) => "divergent",
            Error::NonHorizontal(_) => "non_horizontal",
            Error::NonConvergence(_) => "non_convergence",
            Error::NotContact(_) => "not_contact",
            Error::BranchLocus(_) => "branch_locus",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Checksum { .. } => "checksum",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
