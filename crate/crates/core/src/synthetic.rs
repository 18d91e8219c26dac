//! Seeded synthetic corpora for smoke tests and demos.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{QuestionRecord, Split};

/// Question corpus where every class has its own signature vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    pub signature_tokens: usize,
    pub common_tokens: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word comes from the class signature set.
    pub signature_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 21,
            train_per_class: 50,
            dev_per_class: 15,
            test_per_class: 15,
            signature_tokens: 10,
            common_tokens: 200,
            min_words: 8,
            max_words: 16,
            signature_prob: 0.5,
            seed: 42,
        }
    }
}

pub fn subject_name(class: usize) -> String {
    format!("Subject {class:02}")
}

fn signature_word(class: usize, k: usize) -> String {
    format!("sig{class:02}x{k}")
}

fn common_word(k: usize) -> String {
    format!("word{k:03}")
}

/// Records for all three splits, in split-then-class order.
pub fn generate_corpus(config: &SyntheticConfig) -> Vec<QuestionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let splits = [
        (Split::Train, config.train_per_class),
        (Split::Dev, config.dev_per_class),
        (Split::Test, config.test_per_class),
    ];
    for (split, per_class) in splits {
        for class in 0..config.classes {
            for i in 0..per_class {
                let words = rng.gen_range(config.min_words..=config.max_words);
                let text: Vec<String> = (0..words)
                    .map(|_| {
                        if rng.gen_bool(config.signature_prob) {
                            signature_word(class, rng.gen_range(0..config.signature_tokens))
                        } else {
                            common_word(rng.gen_range(0..config.common_tokens))
                        }
                    })
                    .collect();
                records.push(QuestionRecord {
                    id: format!("{split}-{class:02}-{i:03}"),
                    question_text: text.join(" "),
                    options: ["alpha", "beta", "gamma", "delta"].map(String::from),
                    correct_option: Some(rng.gen_range(0..4)),
                    subject_name: subject_name(class),
                    topic_name: None,
                    split,
                });
            }
        }
    }
    records
}

/// `clusters` isotropic Gaussian blobs in `dim` dimensions with centres on
/// scaled basis vectors. Rows are shuffled; labels give the source blob.
pub fn gaussian_clusters(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> (Array2<f64>, Vec<usize>) {
    assert!(clusters <= dim, "one basis direction per cluster");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).expect("finite spread");
    let mut labels: Vec<usize> = (0..clusters * per_cluster).map(|i| i / per_cluster).collect();
    labels.shuffle(&mut rng);
    let x = Array2::from_shape_fn((labels.len(), dim), |(i, j)| {
        let centre = if j == labels[i] { separation } else { 0.0 };
        centre + noise.sample(&mut rng)
    });
    (x, labels)
}
