//! Crate-wide error type.
//!
//! Every fallible public function in this crate returns [`Result`]. The
//! variants mirror the kinds of failure the numeric pipeline can hit:
//! shape disagreements, invalid arguments, mathematical domain violations,
//! malformed files, and broken internal contracts.

/// Error for all fallible operations in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or matrix shapes do not line up for the requested operation.
    #[error("{op}: dimension mismatch: {details}")]
    Dimension { op: &'static str, details: String },

    /// An argument is outside the accepted range (negative step size,
    /// empty index set, fraction outside (0, 1], ...).
    #[error("{op}: invalid parameter: {details}")]
    Parameter { op: &'static str, details: String },

    /// Input is syntactically fine but mathematically inadmissible
    /// (non-PSD covariance, zero-norm reference field, ...).
    #[error("{op}: domain error: {details}")]
    Domain { op: &'static str, details: String },

    /// A serialized file is malformed. `offset` is the byte position at
    /// which the problem was detected.
    #[error("{path}: format error at byte {offset}: {details}")]
    Format {
        path: String,
        offset: u64,
        details: String,
    },

    /// Configuration is internally inconsistent or does not match the
    /// data it is applied to (checkpoint/model shape clash, ...).
    #[error("{op}: config error: {details}")]
    Config { op: &'static str, details: String },

    /// A caller broke an API contract (non-scalar loss passed to
    /// backward, non-frozen encoder passed to stage-two training, ...).
    #[error("{op}: contract violation: {details}")]
    Contract { op: &'static str, details: String },

    /// Problem size exceeds a documented hard limit.
    #[error("{op}: capacity exceeded: {details}")]
    Capacity { op: &'static str, details: String },

    /// A numeric computation produced NaN/Inf or failed to converge.
    #[error("{op}: numeric failure: {details}")]
    Numeric { op: &'static str, details: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn param(op: &'static str, details: impl Into<String>) -> Self {
        Error::Parameter {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn config(op: &'static str, details: impl Into<String>) -> Self {
        Error::Config {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, details: impl Into<String>) -> Self {
        Error::Contract {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
