use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown category {value:?} for feature {feature:?}")]
    UnknownCategory { feature: String, value: String },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label column is not binary: found values {0:?}")]
    NonBinaryLabel(Vec<String>),

    #[error("not enough attack rows: requested {requested}, available {available}")]
    InsufficientAttacks { requested: usize, available: usize },

    #[error("training diverged in {model} at epoch {epoch}: {detail}")]
    Diverged {
        model: String,
        epoch: usize,
        detail: String,
    },

    #[error("malformed container {path}: {detail}")]
    Container { path: PathBuf, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact for stage {stage:?}: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("config hash mismatch: manifest has {stored}, current config is {current} (use --force to restart)")]
    ConfigHashMismatch { stored: String, current: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
