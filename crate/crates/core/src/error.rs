use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Routing(_) => "routing",
            Error::Evaluation(_) => "evaluation",
            Error::EmptyBatch(_) => "empty_batch",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
