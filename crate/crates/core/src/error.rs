use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Raised during a forward pass or shape trace; names the offending layer.
    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("unsupported for training: {0}")]
    UnsupportedForTraining(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("filters are not duplicates: {0}")]
    NotDuplicate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset pairing error: {0}")]
    Pairing(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used by the CLI for machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptyInput(_) => "empty-input",
            Error::Layer { .. } => "layer",
            Error::UnsupportedTopology(_) => "unsupported-topology",
            Error::UnsupportedForTraining(_) => "unsupported-for-training",
            Error::Format(_) => "format",
            Error::Plan(_) => "plan",
            Error::NotDuplicate(_) => "not-duplicate",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Pairing(_) => "pairing",
            Error::Comparison(_) => "comparison",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// I/O error that names the file involved.
    pub(crate) fn io_at(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
    }

    pub(crate) fn at_layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }
}
