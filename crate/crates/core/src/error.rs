use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("degenerate batch: train-mode batch normalization needs batch >= 2, got {0}")]
    DegenerateBatch(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("numeric error at iteration {iteration}: {message}")]
    NumericAt { iteration: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("persistence error: {0}")]
    Persistence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
