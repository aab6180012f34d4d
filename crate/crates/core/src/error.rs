use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A schema invariant failed; `path` locates the offending field.
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("value out of range at {path}: {message}")]
    Range { path: String, message: String },

    #[error("too many queries: {got} (limit {limit})")]
    TooManyQueries { got: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no model found: {0}")]
    NoModel(String),

    #[error("layout unsatisfiable after {attempts} placement attempts")]
    Layout { attempts: usize },
}

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), message: message.into() }
    }

    pub(crate) fn range(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Range { path: path.into(), message: message.into() }
    }
}
