//! Error type shared by every module of the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FwiError>;

/// All failure modes of the toolkit.
#[derive(Debug)]
pub enum FwiError {
    /// An argument or configuration field violates its contract.
    /// `field` names the offending field or parameter path.
    Invalid { field: String, message: String },
    /// Array dimensions do not agree.
    ShapeMismatch { context: String },
    /// Time stepping would be unstable at this Courant number.
    Cfl { courant: f64, limit: f64 },
    /// A NaN or infinity appeared mid-computation.
    NonFinite { context: String },
    /// A file does not conform to its on-disk format; `field` names the
    /// header field or payload section that failed.
    Format { field: String, message: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl FwiError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        FwiError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(context: impl Into<String>) -> Self {
        FwiError::ShapeMismatch {
            context: context.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        FwiError::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        FwiError::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FwiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FwiError::Invalid { field, message } => write!(f, "invalid {field}: {message}"),
            FwiError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            FwiError::Cfl { courant, limit } => write!(
                f,
                "unstable configuration: Courant number {courant:.6} exceeds limit {limit:.6}"
            ),
            FwiError::NonFinite { context } => write!(f, "non-finite value: {context}"),
            FwiError::Format { field, message } => write!(f, "bad {field}: {message}"),
            FwiError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for FwiError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FwiError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for FwiError {
    fn from(e: std::io::Error) -> Self {
        FwiError::Io(e)
    }
}
