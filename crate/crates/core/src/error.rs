use thiserror::Error;

/// Errors raised by the thermofield library.
#[derive(Debug, Error)]
pub enum TfdError {
    /// Input outside the mathematical domain of an operation (e.g. β ≤ 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed argument: shape mismatch, bad order, invalid flag.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Invalid experiment or grid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// The propagation lost norm beyond tolerance.
    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed data: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, TfdError>;
