use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input failed validation before any work started.
    #[error("validation error: {0}")]
    Validation(String),

    /// A numeric computation produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An LLM backend call failed after retries.
    #[error("backend error{}: {message}", caption_id.as_deref().map(|c| format!(" for caption {c}")).unwrap_or_default())]
    Backend {
        caption_id: Option<String>,
        message: String,
    },

    /// A corpus or knowledge file is missing, corrupt, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
