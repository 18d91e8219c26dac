//! Linear softmax head over frozen sentence embeddings.

mod adamw;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::Scalar;

pub use adamw::adamw_step;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, BatchSampler, TrainConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least {needed} rows, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeHeaderMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Head parameters `W (K x D)`, `b (K)` with their AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub m_weights: Array2<T>,
    pub v_weights: Array2<T>,
    pub m_bias: Array1<T>,
    pub v_bias: Array1<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<T: Scalar> ClassifierState<T> {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self::from_params(Array2::zeros((classes, dim)), Array1::zeros(classes))
    }

    /// Fresh optimizer state around the given parameters.
    pub fn from_params(weights: Array2<T>, bias: Array1<T>) -> Self {
        assert_eq!(weights.nrows(), bias.len(), "one bias per class");
        let (k, d) = weights.dim();
        Self {
            m_weights: Array2::zeros((k, d)),
            v_weights: Array2::zeros((k, d)),
            m_bias: Array1::zeros(k),
            v_bias: Array1::zeros(k),
            weights,
            bias,
            step: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Errors unless this head accepts `dim`-wide inputs.
    pub fn check_dim(&self, dim: usize) -> Result<(), ClassifierError> {
        if dim != self.dim() {
            return Err(ClassifierError::ShapeHeaderMismatch(format!(
                "head expects D={}, embeddings have D={dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Gradients of the loss with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
}

/// `X W^T + b`, one row of logits per input row.
pub fn forward_logits<T: Scalar>(state: &ClassifierState<T>, x: ArrayView2<T>) -> Result<Array2<T>, ClassifierError> {
    if x.ncols() != state.dim() {
        return Err(ClassifierError::ShapeMismatch(format!(
            "input has {} columns, head expects {}",
            x.ncols(),
            state.dim()
        )));
    }
    Ok(x.dot(&state.weights.t()) + &state.bias)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut probs = logits.to_owned();
    for mut row in probs.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean negative log-likelihood over the batch and its gradient with
/// respect to the logits, `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
) -> Result<(T, Array2<T>), ClassifierError> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(ClassifierError::ShapeMismatch(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if b == 0 {
        return Err(ClassifierError::ShapeMismatch("empty batch".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ClassifierError::LabelOutOfRange { label, classes: k });
    }
    let mut total = T::zero();
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += log_sum - row[label];
    }
    let scale = T::one() / T::of(b as f64);
    let mut grad = softmax_rows(logits);
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        row[label] -= T::one();
        row.mapv_inplace(|v| v * scale);
    }
    Ok((total * scale, grad))
}

/// Backpropagates logit gradients through the linear head.
pub fn head_gradients<T: Scalar>(x: ArrayView2<T>, grad_logits: ArrayView2<T>) -> HeadGradients<T> {
    HeadGradients {
        weights: grad_logits.t().dot(&x),
        bias: grad_logits.sum_axis(Axis(0)),
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict<T: Scalar>(state: &ClassifierState<T>, x: ArrayView2<T>) -> Result<Vec<usize>, ClassifierError> {
    Ok(argmax_rows(forward_logits(state, x)?.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_bias_logits() {
        let mut s = ClassifierState::<f64>::zeros(2, 2);
        s.weights = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            forward_logits(&s, array![[1.0, 0.0]].view()).unwrap(),
            array![[1.0, 0.0]]
        );
        s.bias = array![5.0, 5.0];
        s.weights.fill(0.3);
        assert_eq!(
            forward_logits(&s, array![[0.0, 0.0]].view()).unwrap(),
            array![[5.0, 5.0]]
        );
        assert!(matches!(
            forward_logits(&s, array![[0.0, 0.0, 1.0]].view()),
            Err(ClassifierError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn logits_match_dot_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, d, b) = (4, 6, 5);
        let w: Array2<f64> = Array2::from_shape_fn((k, d), |_| rng.gen_range(-1.0..1.0));
        let bias = Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
        let s = ClassifierState::from_params(w.clone(), bias.clone());
        let logits = forward_logits(&s, x.view()).unwrap();
        for i in 0..b {
            for c in 0..k {
                let mut acc = bias[c];
                for j in 0..d {
                    acc += x[[i, j]] * w[[c, j]];
                }
                assert!((logits[[i, c]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Array2::<f64>::from_elem((3, 21), 0.7);
        let (loss, _) = softmax_cross_entropy(logits.view(), &[0, 5, 20]).unwrap();
        assert!((loss - 21f64.ln()).abs() < 1e-12);
        assert!((loss - 3.044522).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let mut logits = Array2::<f64>::zeros((1, 4));
        logits[[0, 2]] = 1000.0;
        let (loss, grad) = softmax_cross_entropy(logits.view(), &[2]).unwrap();
        assert!(loss.abs() < 1e-300 + 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn label_range_checked() {
        let logits = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            softmax_cross_entropy(logits.view(), &[3]),
            Err(ClassifierError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Array2<f64> = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-3.0..3.0));
        let labels = [0, 4, 2, 2];
        let (_, grad) = softmax_cross_entropy(logits.view(), &labels).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for k in 0..5 {
                let mut plus = logits.clone();
                plus[[i, k]] += h;
                let mut minus = logits.clone();
                minus[[i, k]] -= h;
                let fd = (softmax_cross_entropy(plus.view(), &labels).unwrap().0
                    - softmax_cross_entropy(minus.view(), &labels).unwrap().0)
                    / (2.0 * h);
                let rel = (fd - grad[[i, k]]).abs() / fd.abs().max(grad[[i, k]].abs()).max(1e-8);
                assert!(rel < 1e-4, "({i},{k}) fd {fd} analytic {}", grad[[i, k]]);
            }
        }
    }

    #[test]
    fn predict_ties_and_basic() {
        assert_eq!(
            argmax_rows(array![[0.1, 0.9], [0.5, 0.5], [2.0, -1.0]].view()),
            vec![1, 0, 0]
        );
    }

    #[test]
    fn predict_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = ClassifierState::from_params(
            Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0)),
            Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)),
        );
        let x = Array2::from_shape_fn((20, 4), |_| rng.gen_range(-1.0..1.0));
        let logits = forward_logits(&s, x.view()).unwrap();
        let expected: Vec<usize> = (0..20)
            .map(|i| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..6 {
                    if logits[[i, k]] > best_v {
                        best_v = logits[[i, k]];
                        best = k;
                    }
                }
                best
            })
            .collect();
        assert_eq!(predict(&s, x.view()).unwrap(), expected);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(vals in proptest::collection::vec(-50.0f64..50.0, 12),
                                     labels in proptest::collection::vec(0usize..4, 3)) {
            let logits = Array2::from_shape_vec((3, 4), vals).unwrap();
            let p = softmax_rows(logits.view());
            for row in p.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
            let (loss, _) = softmax_cross_entropy(logits.view(), &labels).unwrap();
            prop_assert!(loss >= 0.0);
        }

        #[test]
        fn argmax_invariant_to_shift_and_monotone_maps(vals in proptest::collection::vec(-5.0f64..5.0, 15),
                                                       shift in -100.0f64..100.0) {
            let logits = Array2::from_shape_vec((3, 5), vals).unwrap();
            let base = argmax_rows(logits.view());
            prop_assert_eq!(argmax_rows(logits.mapv(|v| v + shift).view()), base.clone());
            prop_assert_eq!(argmax_rows(logits.mapv(|v| v.exp()).view()), base.clone());
            prop_assert_eq!(argmax_rows(logits.mapv(|v| v * v * v + 2.0 * v).view()), base);
        }
    }
}
