use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Waterfilling was asked to remove more mass than is present.
    #[error("budget {budget} exceeds available mass {total}")]
    Budget { budget: f64, total: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            expected: format!("{what} of length {expected}"),
            found: format!("length {found}"),
        });
    }
    Ok(())
}
