use alloc::boxed::Box;
use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An operation produced a NaN or infinite value.
    #[error("non-finite value produced by `{op}`")]
    Numerical { op: &'static str },
    /// Shapes or model specifications that do not line up.
    #[error("spec error: {0}")]
    Spec(String),
    /// A caller-side precondition was violated.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Failure inside the unrolled inner loop.
    #[error("inner step {step} failed (last clean-set loss {last_loss}): {cause}")]
    InnerStep { step: usize, last_loss: f64, cause: Box<Error> },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! spec_err {
    ($($arg:tt)*) => { $crate::error::Error::Spec(alloc::format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}

pub(crate) use {contract_err, spec_err};
