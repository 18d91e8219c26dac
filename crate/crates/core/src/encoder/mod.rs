//! Encoder backends: token batches in, per-token hidden states out.

mod bert;
mod reference;
mod safetensors;

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::tokenizer::{TokenBatch, TokenizerError, TokenizerSpec};

pub use bert::{load_backend, BertConfig, LoadedBackend, CONFIG_FILE, MANIFEST_FILE, TOKENIZER_FILE, WEIGHTS_FILE};
pub use reference::{reference_backend, ReferenceBackend};
pub use safetensors::{write_safetensors, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("model not found at {0}")]
    ModelNotFound(PathBuf),
    #[error("format mismatch: expected {expected}, found {found}")]
    FormatMismatch { expected: String, found: String },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("token id {id} outside model vocabulary of {vocab_size}")]
    InvalidTokenId { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds model limit {limit}")]
    SequenceTooLong { len: usize, limit: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EncoderError {
    pub(crate) fn format(expected: impl Into<String>, found: impl Into<String>) -> Self {
        EncoderError::FormatMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }
}

/// Hidden states for a batch, shape `B x L x D`, with the batch's mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub hidden_states: Array3<T>,
    pub attention_mask: Array2<u8>,
    pub dim: usize,
}

/// A sentence encoder producing per-token hidden states.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Embedding width D.
    fn dim(&self) -> usize;

    /// Stable identity of the loaded weights, used to key caches.
    fn fingerprint(&self) -> String;

    /// Whether `evaluate` may be called concurrently from several threads.
    fn thread_safe(&self) -> bool {
        false
    }

    /// Tokenizer shipped with the model, if any.
    fn tokenizer(&self) -> Option<&TokenizerSpec> {
        None
    }

    fn evaluate(&self, batch: &TokenBatch) -> Result<EncoderOutput<f32>, EncoderError>;
}

impl<B: EncoderBackend + ?Sized> EncoderBackend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn thread_safe(&self) -> bool {
        (**self).thread_safe()
    }
    fn tokenizer(&self) -> Option<&TokenizerSpec> {
        (**self).tokenizer()
    }
    fn evaluate(&self, batch: &TokenBatch) -> Result<EncoderOutput<f32>, EncoderError> {
        (**self).evaluate(batch)
    }
}
