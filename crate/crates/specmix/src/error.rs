use thiserror::Error;

/// Errors surfaced by the unmixing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite values produced by op `{op}`")]
    NonFinite { op: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {0}")]
    Diverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {}", e))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) => 2,
            Error::Format(_) => 3,
            Error::Diverged(_) => 4,
            _ => 1,
        }
    }
}
