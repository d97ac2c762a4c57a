use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },
    #[error("key region contains no scene points")]
    EmptyRegion,
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("at least 2 runs are required for aggregation, got {0}")]
    InsufficientRuns(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
