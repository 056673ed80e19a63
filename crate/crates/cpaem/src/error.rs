//! Crate-wide error type.
//!
//! Errors are grouped by how the CLI maps them to exit codes: usage errors
//! (bad arguments, malformed files, shape mismatches) exit with 1, numerical
//! failures (non-SPD covariances, degenerate weights, monotonicity violations,
//! solver breakdowns) with 2, and resource limits (region-count caps) with 3.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed user input: bad flags, malformed model/data files,
    /// dimension mismatches between inputs.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A network that violates the structural invariants (dimension chain,
    /// final-layer activation, finiteness).
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    /// A hidden unit whose weight row is identically zero; such a unit has no
    /// activation hyperplane and breaks the code↔region bijection.
    #[error("degenerate weights: hidden layer {layer}, unit {unit} has a zero weight row")]
    DegenerateWeights { layer: usize, unit: usize },

    /// A covariance matrix that failed its Cholesky factorization.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    /// Numerical failure during a computation (solver breakdown, NaN,
    /// EM monotonicity violation, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configured resource limit was exceeded (e.g. the region-count cap).
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 numerical, 3 resource.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::InvalidNetwork(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::DegenerateWeights { .. } | Error::NotSpd(_) | Error::Numerical(_) => 2,
            Error::Resource(_) => 3,
        }
    }
}
