//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide error enum. Variants map onto the CLI exit-code contract:
/// `Shape`/`Config`/`Contract` are programming or configuration mistakes,
/// `Format`/`Io` are data errors, `CheckFailed` is a failed verification.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor dimension mismatch; the message names the offending extents.
    Shape(String),
    /// Invalid hyperparameter combination.
    Config(String),
    /// A runtime contract was violated (non-scalar loss, non-binary spikes, ...).
    Contract(String),
    /// Malformed file contents (bad magic, truncation, version mismatch).
    Format(String),
    /// Underlying I/O failure, stringified to keep the error `Clone`.
    Io(String),
    /// A numerical check (gradient check, oracle comparison) failed.
    CheckFailed(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}

#[macro_export]
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
