use alloc::string::String;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A NaN or infinity was produced while evaluating network layer `layer`.
    #[error("non-finite value encountered in layer {layer}")]
    NonFinite { layer: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Raised by callers' hooks, e.g. a failed write while persisting a run.
    #[error("{0}")]
    External(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
