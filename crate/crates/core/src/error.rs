use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("chat client: {0}")]
    Client(#[from] crate::hypothesis::ClientError),
    #[error("captioning event {index} failed: {source}")]
    Caption {
        index: usize,
        source: crate::hypothesis::ClientError,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::NumericalDomain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
