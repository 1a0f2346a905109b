use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad flags, bad config or a refused overwrite.
    #[error("{0}")]
    Usage(String),

    /// A run or check violated an invariant.
    #[error("{0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<deco_core::Error> for HarnessError {
    fn from(e: deco_core::Error) -> Self {
        match e {
            deco_core::Error::Config(_) => Self::Usage(e.to_string()),
            other => Self::Invariant(other.to_string()),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
