//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by network construction, the structured solvers, and the
/// optimizer loop.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Architecture or transform specification is malformed.
    InvalidArchitecture(String),
    /// Operand shapes do not match what the operation requires.
    ShapeMismatch(String),
    /// A matrix that must be invertible (or positive definite) is not.
    /// `layer` is the 1-based layer index when the failure is per-layer.
    Singular { what: String, layer: Option<usize> },
    /// A dense-assembly size guard was exceeded.
    GuardExceeded { limit: usize, got: usize },
    /// A pass record is missing back-propagated gradients.
    MissingGradients,
    /// The inverse cache does not match the current damping strength.
    StaleCache,
    /// The requested operation is not available in this approximation mode.
    UnsupportedMode(String),
    /// A non-finite value appeared during optimization.
    NonFinite { what: String, iteration: u64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidArchitecture(msg) => write!(f, "invalid architecture: {msg}"),
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::Singular { what, layer } => match layer {
                Some(i) => write!(f, "singular matrix in {what} at layer {i}"),
                None => write!(f, "singular matrix in {what}"),
            },
            CoreError::GuardExceeded { limit, got } => {
                write!(f, "size guard exceeded: {got} parameters > limit {limit}")
            }
            CoreError::MissingGradients => {
                write!(f, "pass record has no back-propagated gradients")
            }
            CoreError::StaleCache => {
                write!(
                    f,
                    "inverse cache was built for a different damping strength"
                )
            }
            CoreError::UnsupportedMode(msg) => write!(f, "unsupported in this mode: {msg}"),
            CoreError::NonFinite { what, iteration } => {
                write!(f, "non-finite {what} at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
