//! Question embeddings: batched encoding, masked mean pooling and L2
//! normalization, producing an `N x D` matrix with one row per record.

pub mod cache;

use std::collections::HashSet;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::QuestionRecord;
use crate::encoder::{EncoderBackend, EncoderError, EncoderOutput};
use crate::scalar::Scalar;
use crate::tokenizer::{tokenize_batch, TokenizerError, TokenizerSpec};

pub use cache::{read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};

/// Questions per encoder invocation.
pub const DEFAULT_EMBED_BATCH: usize = 500;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("row {0} has an all-zero attention mask")]
    EmptyRow(usize),
    #[error("no records to embed")]
    EmptyInput,
    #[error("batch size must be >= 1")]
    InvalidBatchSize,
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("{ids} ids for {rows} rows")]
    ShapeMismatch { ids: usize, rows: usize },
    #[error("batch {batch}: {source}")]
    Tokenize {
        batch: usize,
        #[source]
        source: TokenizerError,
    },
    #[error("batch {batch}: {source}")]
    Backend {
        batch: usize,
        #[source]
        source: EncoderError,
    },
    #[error("backend returned width {found}, declared {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bad cache magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported cache version {0}")]
    VersionUnsupported(u32),
    #[error("cache truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("record id longer than 65535 bytes: {0:?}")]
    IdTooLong(String),
    #[error("record id is not valid UTF-8")]
    CorruptId,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-per-record embedding matrix stored in 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Array2<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: Array2<f32>, normalized: bool) -> Result<Self, EmbeddingError> {
        if ids.len() != data.nrows() {
            return Err(EmbeddingError::ShapeMismatch {
                ids: ids.len(),
                rows: data.nrows(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, data, normalized })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Rows converted to another scalar type.
    pub fn to_scalar<T: Scalar>(&self) -> Array2<T> {
        self.data.mapv(|v| T::of(v as f64))
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            data: self.data.select(ndarray::Axis(0), rows),
            normalized: self.normalized,
        }
    }

    /// Row-wise concatenation; ids must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let ids = self.ids.iter().chain(&other.ids).cloned().collect();
        let data =
            ndarray::concatenate(ndarray::Axis(0), &[self.data.view(), other.data.view()]).expect("equal widths");
        Self::new(ids, data, self.normalized && other.normalized)
    }
}

fn pool<T: Scalar, U: Scalar>(output: &EncoderOutput<T>) -> Result<Array2<U>, EmbeddingError> {
    let (b, l, d) = output.hidden_states.dim();
    let mut pooled = Array2::zeros((b, d));
    let mut acc = vec![0f64; d];
    for i in 0..b {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut count = 0usize;
        for t in 0..l {
            if output.attention_mask[[i, t]] == 0 {
                continue;
            }
            count += 1;
            for (a, h) in acc.iter_mut().zip(output.hidden_states.slice(s![i, t, ..])) {
                *a += h.as_f64();
            }
        }
        if count == 0 {
            return Err(EmbeddingError::EmptyRow(i));
        }
        let denom = count as f64;
        for (dst, a) in pooled.row_mut(i).iter_mut().zip(&acc) {
            *dst = U::of(a / denom);
        }
    }
    Ok(pooled)
}

/// Masked mean over the sequence axis: padded positions contribute nothing
/// and each row is divided by its own token count. Sums run in f64.
pub fn mean_pool<T: Scalar>(output: &EncoderOutput<T>) -> Result<Array2<T>, EmbeddingError> {
    pool(output)
}

/// Scales each row to unit Euclidean norm: `v / max(|v|, epsilon)`.
pub fn l2_normalize<T: Scalar>(vectors: ArrayView2<T>, epsilon: T) -> Array2<T> {
    let eps = epsilon.as_f64();
    let mut out = vectors.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        row.mapv_inplace(|v| T::of(v.as_f64() / denom));
    }
    out
}

fn embed_batch<B: EncoderBackend + ?Sized>(
    texts: &[&str],
    batch_index: usize,
    backend: &B,
    spec: &TokenizerSpec,
) -> Result<Array2<f32>, EmbeddingError> {
    let batch = tokenize_batch(texts, spec).map_err(|source| EmbeddingError::Tokenize {
        batch: batch_index,
        source,
    })?;
    let output = backend.evaluate(&batch).map_err(|source| EmbeddingError::Backend {
        batch: batch_index,
        source,
    })?;
    if output.dim != backend.dim() || output.hidden_states.dim().2 != backend.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: backend.dim(),
            found: output.hidden_states.dim().2,
        });
    }
    let pooled: Array2<f64> = pool(&output)?;
    let normalized = l2_normalize(pooled.view(), DEFAULT_NORM_EPSILON);
    Ok(normalized.mapv(|v| v as f32))
}

/// Embeds every record's question text, `batch_size` questions per encoder
/// call. Rows follow record order. Batches run in parallel when the backend
/// is thread-safe; each batch owns a fixed row range, so the result does not
/// depend on scheduling.
pub fn embed_corpus<B: EncoderBackend + ?Sized>(
    records: &[QuestionRecord],
    backend: &B,
    spec: &TokenizerSpec,
    batch_size: usize,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    if batch_size == 0 {
        return Err(EmbeddingError::InvalidBatchSize);
    }
    if records.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    let texts: Vec<&str> = records.iter().map(|r| r.question_text.as_str()).collect();
    let chunks: Vec<(usize, &[&str])> = texts.chunks(batch_size).enumerate().collect();
    let run = |&(i, chunk): &(usize, &[&str])| embed_batch(chunk, i, backend, spec);
    let blocks: Vec<Array2<f32>> = if backend.thread_safe() {
        chunks.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        chunks.iter().map(run).collect::<Result<_, _>>()?
    };

    let mut data = Array2::zeros((records.len(), backend.dim()));
    let mut start = 0;
    for block in blocks {
        let end = start + block.nrows();
        data.slice_mut(s![start..end, ..]).assign(&block);
        start = end;
    }
    EmbeddingMatrix::new(records.iter().map(|r| r.id.clone()).collect(), data, true)
}
