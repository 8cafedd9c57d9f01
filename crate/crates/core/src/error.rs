use alloc::string::String;

/// Errors raised by the kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A state left the blowup guard; callers record a `Blowup` verdict.
    #[error("state magnitude exceeded the blowup guard")]
    Overflow,
    /// NaN produced from finite inputs (e.g. a malformed user function).
    #[error("non-finite value produced")]
    NonFinite,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
