//! Error type shared across the crate.

use thiserror::Error;

/// Unified error for dynamics evaluation, discretization, optimization and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("nonpositive mass {0:.6e} (scaled units); dynamics are undefined")]
    NonpositiveMass(f64),

    #[error("radius {radius:.6e} below floor {floor:.0e} (scaled length units)")]
    SingularRadius { radius: f64, floor: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive semidefinite: minimum eigenvalue {min_eig:.3e} below {tol:.0e}")]
    IndefiniteMatrix { min_eig: f64, tol: f64 },

    #[error("scale units must be strictly positive, got {0}")]
    InvalidScale(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quantile level must lie strictly inside (0, 1), got {0}")]
    InvalidQuantileLevel(f64),

    #[error("conic program is malformed: {0}")]
    MalformedProgram(String),

    #[error("conic subproblem at SCP iteration {iteration} returned status {status}")]
    SubproblemFailed { iteration: usize, status: String },

    #[error("SCP did not converge within {max_iterations} iterations (mean shift {mean_shift:.3e}, max slack {zeta_max:.3e})")]
    NotConverged {
        max_iterations: usize,
        mean_shift: f64,
        zeta_max: f64,
    },

    #[error("covariance at node {node} is numerically singular (min eigenvalue {min_eig:.3e}); cannot recover gains")]
    SingularCovariance { node: usize, min_eig: f64 },

    #[error("reference trajectory invalid: {0}")]
    InvalidReference(String),

    #[error("scenario error at {location}: {message}")]
    ScenarioError { location: String, message: String },

    #[error("ensemble needs at least two samples to form statistics")]
    TooFewSamples,

    #[error("I/O failure for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Helper for scenario parse errors that carry a field path or line number.
    pub fn scenario(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ScenarioError {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Machine-readable category used by the CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::NonpositiveMass(_) | Error::SingularRadius { .. } => "dynamics",
            Error::DimensionMismatch(_) | Error::IndefiniteMatrix { .. } => "linear-algebra",
            Error::InvalidScale(_) | Error::InvalidParameter(_) | Error::InvalidQuantileLevel(_) => {
                "parameter"
            }
            Error::MalformedProgram(_) => "conic-program",
            Error::SubproblemFailed { .. } | Error::NotConverged { .. } => "optimization",
            Error::SingularCovariance { .. } => "gain-recovery",
            Error::InvalidReference(_) => "reference",
            Error::ScenarioError { .. } => "scenario",
            Error::TooFewSamples => "ensemble",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
