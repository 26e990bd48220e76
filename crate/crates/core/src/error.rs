use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NablaError {
    /// Malformed file contents (bad magic, unsupported version, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Well-formed data that violates a value invariant, e.g. a NaN element.
    #[error("validation error: {0}")]
    Validation(String),
    /// Shape, extent or divisibility mismatch.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Out-of-range algorithm parameter.
    #[error("parameter error: {0}")]
    Param(String),
    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },
    /// The message already carries the OS error, so it is not chained as a
    /// source as well.
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for NablaError {
    fn from(e: io::Error) -> Self {
        NablaError::Io(e)
    }
}

pub type Result<T, E = NablaError> = std::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::NablaError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
