use thiserror::Error;

/// Errors raised anywhere in the engine, trainer, analyses or CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("unknown model id `{0}` (expected one of tiny_dw, tiny_group, tiny_dense)")]
    UnknownModel(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    Stage { expected: String, found: String },

    #[error("dataset: {0}")]
    Data(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
