//! Subject classification of multiple-choice medical exam questions.
//!
//! The pipeline turns question text into sentence embeddings and trains a
//! linear softmax head on them:
//!
//! ```text
//! records -> tokenize -> encoder -> mean pool -> L2 normalize -> cache
//!         -> softmax head (AdamW) -> predictions -> accuracy / confusion
//!         -> 2-component t-SNE of the embeddings
//! ```
//!
//! Numerical code (pooling, normalization, the classifier head and t-SNE) is
//! generic over [`Scalar`]; the aliases below pin the usual `f32` / `f64`
//! instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod evaluation;
pub mod scalar;
pub mod synthetic;
pub mod tokenizer;
pub mod tsne;

pub use classifier::{
    adamw_step, forward_logits, head_gradients, predict, softmax_cross_entropy, train, ClassifierError,
    ClassifierState, HeadGradients, TrainConfig, TrainHistory,
};
pub use dataset::{
    build_vocabulary, parse_records, summarize_splits, DatasetError, QuestionRecord, Split, SplitSummary,
    SubjectVocabulary,
};
pub use embedding::{embed_corpus, l2_normalize, mean_pool, read_cache, write_cache, EmbeddingError, EmbeddingMatrix};
pub use encoder::{load_backend, reference_backend, EncoderBackend, EncoderError, EncoderOutput};
pub use evaluation::{accuracy, build_report, confusion_matrix, EvalError, EvalReport};
pub use scalar::Scalar;
pub use tokenizer::{tokenize_batch, TokenBatch, TokenizerSpec};
pub use tsne::{
    calibrate_sigmas, joint_affinities, kl_divergence, pairwise_sq_distances, tsne_optimize, AffinityMatrix,
    Projection, TsneConfig, TsneError,
};

/// Embedding width of the reference sentence encoder.
pub const REFERENCE_DIM: usize = 384;

pub type ClassifierStateF32 = ClassifierState<f32>;
pub type ClassifierStateF64 = ClassifierState<f64>;
pub type HeadGradientsF32 = HeadGradients<f32>;
pub type HeadGradientsF64 = HeadGradients<f64>;
pub type EncoderOutputF32 = EncoderOutput<f32>;
pub type EncoderOutputF64 = EncoderOutput<f64>;
pub type AffinityMatrixF32 = AffinityMatrix<f32>;
pub type AffinityMatrixF64 = AffinityMatrix<f64>;
