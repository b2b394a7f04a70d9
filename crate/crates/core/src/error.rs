use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (e.g. every step masked).
    #[error("data error: {0}")]
    Data(String),

    /// A file does not follow the expected layout.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// Non-finite values or divergence.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss or gradient. Carries the last
    /// checkpoint whose parameters were all finite.
    #[error("training diverged: {message}")]
    Diverged {
        message: String,
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },

    /// API misuse, e.g. backward from a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: &str, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension(format!("{op}: incompatible shapes {lhs:?} and {rhs:?}"))
    }
}
