use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Incompatible batch or parameter shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite quantity.
    #[error("numerical failure at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },
}

pub(crate) fn contract(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
