use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum UcaError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dim {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, UcaError>;

impl UcaError {
    pub fn dim(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        UcaError::Dim {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UcaError::Io {
            path: path.into(),
            source,
        }
    }
}
