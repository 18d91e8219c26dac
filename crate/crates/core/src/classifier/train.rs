use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{adamw_step, forward_logits, head_gradients, softmax_cross_entropy, ClassifierError, ClassifierState};
use crate::scalar::Scalar;

/// Optimizer and schedule settings. Defaults: AdamW with lr 1e-5, eps 1e-8,
/// no weight decay, 10 epochs of 100 steps, 8 examples per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epsilon: 1e-8,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |msg: &str| Err(ClassifierError::InvalidConfig(msg.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// `key=value` lines in a fixed order.
    pub fn canonical(&self) -> String {
        format!(
            "learning_rate={:e}\nepsilon={:e}\nweight_decay={:e}\nbeta1={:e}\nbeta2={:e}\nepochs={}\nsteps_per_epoch={}\nbatch_size={}\nseed={}\n",
            self.learning_rate,
            self.epsilon,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.epochs,
            self.steps_per_epoch,
            self.batch_size,
            self.seed
        )
    }

    /// First 8 bytes of SHA-256 over [`TrainConfig::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub config: TrainConfig,
    pub final_dev_accuracy: Option<f64>,
}

impl TrainHistory {
    /// `step,epoch,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for (i, loss) in self.step_losses.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, i / self.config.steps_per_epoch + 1, loss));
        }
        out
    }
}

/// Seeded shuffled cyclic sampler: walks a permutation of the rows and
/// reshuffles whenever it is exhausted.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Trains a `num_classes`-way head on `x` (one row per example) for exactly
/// `epochs * steps_per_epoch` optimizer steps. Deterministic for a fixed
/// config, including the seed.
pub fn train<T: Scalar>(
    x: ArrayView2<T>,
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(ClassifierState<T>, TrainHistory), ClassifierError> {
    config.validate()?;
    let (n, d) = x.dim();
    if labels.len() != n {
        return Err(ClassifierError::ShapeMismatch(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if n < config.batch_size {
        return Err(ClassifierError::InsufficientData {
            needed: config.batch_size,
            available: n,
        });
    }
    if d == 0 || num_classes == 0 {
        return Err(ClassifierError::ShapeMismatch("empty head".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(ClassifierError::LabelOutOfRange {
            label,
            classes: num_classes,
        });
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / (d as f64).sqrt();
    let weights = Array2::from_shape_fn((num_classes, d), |_| T::of(init_rng.gen_range(-bound..=bound)));
    let mut state = ClassifierState::from_params(weights, Array1::zeros(num_classes));

    let mut sampler = BatchSampler::new(n, config.seed);
    let mut step_losses = Vec::with_capacity(config.total_steps());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let rows = sampler.next_batch(config.batch_size);
            let xb = x.select(Axis(0), &rows);
            let yb: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let logits = forward_logits(&state, xb.view())?;
            let (loss, grad_logits) = softmax_cross_entropy(logits.view(), &yb)?;
            let grads = head_gradients(xb.view(), grad_logits.view());
            adamw_step(&mut state, &grads, config)?;
            let loss = loss.as_f64();
            step_losses.push(loss);
            epoch_total += loss;
        }
        epoch_losses.push(epoch_total / config.steps_per_epoch as f64);
    }

    Ok((
        state,
        TrainHistory {
            step_losses,
            epoch_losses,
            config: config.clone(),
            final_dev_accuracy: None,
        },
    ))
}
