use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("neighbourhood is empty after self-exclusion")]
    EmptyNeighbourhood,

    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("requested {k} neighbours but only {available} candidates exist")]
    KTooLarge { k: usize, available: usize },

    #[error("unknown id {0}")]
    UnknownId(usize),

    #[error("activation cache was produced by model generation {cached}, model is at {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{location}: {message}")]
    Format { location: String, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Errors caused by bad user input rather than I/O or numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Diverged { .. })
    }
}
