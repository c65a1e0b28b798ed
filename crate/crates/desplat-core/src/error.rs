//! Error type shared by all core operations.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter value violates its documented precondition
    /// (zero-norm quaternion, non-orthonormal camera rotation, ...).
    InvalidParameter(String),
    /// An argument shape or range is wrong for the call
    /// (mismatched image sizes, fraction out of [0,1), n <= k, ...).
    InvalidArgument(String),
    /// A numerically impossible state was reached; indicates a bug.
    Internal(String),
    /// The optimizer produced a non-finite parameter; the run must abort.
    Divergence { step: u64, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
            Error::Divergence { step, detail } => {
                write!(f, "divergence at step {step}: {detail}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
