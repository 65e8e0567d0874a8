use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("vehicle {0} is not awaiting a decision")]
    NotAwaitingDecision(usize),

    #[error("unknown model kind `{0}`")]
    UnknownModel(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code used in JSON error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "invalid_config",
            Error::Parse(_) => "parse_error",
            Error::MalformedRow { .. } => "malformed_row",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Disconnected { .. } => "disconnected_graph",
            Error::NotAwaitingDecision(_) => "not_awaiting_decision",
            Error::UnknownModel(_) => "unknown_model",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
