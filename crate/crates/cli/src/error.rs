use std::path::PathBuf;

use mqseq_core::{ClassifierError, DatasetError, EmbeddingError, EncoderError, TsneError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: DatasetError },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("encoder backend: {0}")]
    Backend(#[from] EncoderError),
    #[error("embedding: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("classifier: {0}")]
    Classifier(#[from] ClassifierError),
    #[error("t-SNE: {0}")]
    Tsne(TsneError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Precondition(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TsneError> for CliError {
    fn from(e: TsneError) -> Self {
        match e {
            TsneError::InvalidPerplexity { .. } | TsneError::InvalidConfig(_) | TsneError::TooFewPoints(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Tsne(other),
        }
    }
}

impl CliError {
    /// 0 ok, 2 ingest, 3 embed/backend, 4 shape/train, 5 numerical, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Ingest { .. } | CliError::MissingInput(_) => 2,
            CliError::Backend(_) | CliError::Embedding(_) => 3,
            CliError::Shape(_) | CliError::Classifier(_) => 4,
            CliError::Tsne(_) => 5,
            CliError::Config(_) | CliError::Precondition(_) | CliError::Io(_) => 1,
        }
    }
}
