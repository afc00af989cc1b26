use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid shard plan: {0}")]
    Plan(String),

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("ring engine: {0}")]
    Engine(String),

    #[error("unknown sequence {0}")]
    UnknownSequence(u32),

    #[error("scenario error at {location}: {message}")]
    Scenario { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Whether the error stems from user-supplied configuration rather than
    /// a failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Scenario { .. } | Error::UnknownSequence(_) | Error::Io(_)
        )
    }
}
