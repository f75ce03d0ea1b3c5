use thiserror::Error;

/// Errors surfaced by the visual pipeline, trainer, and file formats.
#[derive(Debug, Error)]
pub enum StabError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// Softmax over an empty key set is undefined.
    #[error("attention mask has no valid keys")]
    AllMasked,

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because a loss or gradient became non-finite.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StabError>;

impl StabError {
    pub fn shape(msg: impl Into<String>) -> Self {
        StabError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        StabError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        StabError::Data(msg.into())
    }
}
