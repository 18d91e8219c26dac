//! Accuracy, confusion matrices and per-class precision / recall / F1.

use thiserror::Error;

use crate::dataset::SubjectVocabulary;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{predictions} predictions for {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

fn check_lengths(predictions: &[usize], gold: &[usize]) -> Result<(), EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64, EvalError> {
    check_lengths(predictions, gold)?;
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// `K x K` counts, rows gold, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, gold: usize) -> u64 {
        self.counts[gold].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|r| r[predicted]).sum()
    }

    /// Element-wise sum, for merging disjoint evaluations.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.classes(), other.classes(), "class counts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// CSV with a header row and a leading column of class names.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("gold\\predicted");
        for n in names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            out.push_str(&csv_field(name));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn confusion_matrix(predictions: &[usize], gold: &[usize], classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &g) in predictions.iter().zip(gold) {
        let label = p.max(g);
        if label >= classes {
            return Err(EvalError::LabelOutOfRange { label, classes });
        }
        m.counts[g][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub label: usize,
    pub name: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the class was never predicted (precision reported as 0).
    pub precision_undefined: bool,
    /// Set when the class has no gold examples (recall reported as 0).
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub n: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn build_report(predictions: &[usize], gold: &[usize], vocab: &SubjectVocabulary) -> Result<EvalReport, EvalError> {
    check_lengths(predictions, gold)?;
    let confusion = confusion_matrix(predictions, gold, vocab.len())?;
    let per_class = (0..vocab.len())
        .map(|k| {
            let tp = confusion.get(k, k);
            let (precision, precision_undefined) = ratio(tp, confusion.col_sum(k));
            let (recall, recall_undefined) = ratio(tp, confusion.row_sum(k));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: k,
                name: vocab.name(k).unwrap_or_default().to_string(),
                support: confusion.row_sum(k),
                precision,
                recall,
                f1,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let n = confusion.total();
    Ok(EvalReport {
        accuracy: confusion.trace() as f64 / n as f64,
        per_class,
        confusion,
        n,
    })
}

impl EvalReport {
    pub fn macro_f1(&self) -> f64 {
        self.per_class.iter().map(|c| c.f1).sum::<f64>() / self.per_class.len().max(1) as f64
    }

    pub fn render_table(&self) -> String {
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$} {:>8} {:>9} {:>7} {:>7}\n",
            "class", "support", "precision", "recall", "f1"
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$} {:>8} {:>9.4} {:>7.4} {:>7.4}\n",
                c.name, c.support, c.precision, c.recall, c.f1
            ));
        }
        out.push_str(&format!("accuracy {:.4} over {} questions\n", self.accuracy, self.n));
        out
    }

    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = format!(
            "accuracy={}\nn={}\ncorrect={}\nclasses={}\nmacro_f1={}\n",
            self.accuracy,
            self.n,
            self.confusion.trace(),
            self.per_class.len(),
            self.macro_f1()
        );
        for c in &self.per_class {
            let p = format!("class.{}", c.label);
            out.push_str(&format!("{p}.name={}\n", c.name));
            out.push_str(&format!("{p}.support={}\n", c.support));
            out.push_str(&format!("{p}.precision={}\n", c.precision));
            out.push_str(&format!("{p}.recall={}\n", c.recall));
            out.push_str(&format!("{p}.f1={}\n", c.f1));
            out.push_str(&format!("{p}.precision_undefined={}\n", c.precision_undefined));
            out.push_str(&format!("{p}.recall_undefined={}\n", c.recall_undefined));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(k: usize) -> SubjectVocabulary {
        SubjectVocabulary::from_names((0..k).map(|i| format!("c{i}"))).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(
            accuracy(&[0], &[0, 1]),
            Err(EvalError::LengthMismatch {
                predictions: 1,
                gold: 2
            })
        );
        assert_eq!(accuracy(&[], &[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn confusion_shapes() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(m.rows(), &[vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let m = confusion_matrix(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.rows(), &[vec![1, 0, 0], vec![1, 0, 0], vec![1, 0, 0]]);
        assert_eq!(
            confusion_matrix(&[3], &[0], 3),
            Err(EvalError::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn confusion_matches_tally_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let gold: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
        let pred: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
        let m = confusion_matrix(&pred, &gold, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut tally = 0;
                for s in 0..50 {
                    if gold[s] == i && pred[s] == j {
                        tally += 1;
                    }
                }
                assert_eq!(m.get(i, j), tally);
            }
        }
    }

    #[test]
    fn single_class_all_correct() {
        let r = build_report(&[0, 0, 0], &[0, 0, 0], &vocab(1)).unwrap();
        assert_eq!(
            (r.per_class[0].precision, r.per_class[0].recall, r.per_class[0].f1),
            (1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let r = build_report(&[0, 0], &[0, 1], &vocab(2)).unwrap();
        let c1 = &r.per_class[1];
        assert_eq!(c1.precision, 0.0);
        assert!(c1.precision_undefined);
        assert_eq!(c1.f1, 0.0);
        assert!(r.to_key_value().contains("class.1.precision_undefined=true"));
    }

    #[test]
    fn three_class_hand_computed() {
        // gold:  0 0 0 1 1 2 2 2
        // pred:  0 0 1 1 2 2 2 0
        let gold = [0, 0, 0, 1, 1, 2, 2, 2];
        let pred = [0, 0, 1, 1, 2, 2, 2, 0];
        let r = build_report(&pred, &gold, &vocab(3)).unwrap();
        // class 0: tp 2, predicted 3, support 3
        // class 1: tp 1, predicted 2, support 2
        // class 2: tp 2, predicted 3, support 3
        let expect = [(2.0 / 3.0, 2.0 / 3.0), (0.5, 0.5), (2.0 / 3.0, 2.0 / 3.0)];
        for (c, (p, rcl)) in r.per_class.iter().zip(expect) {
            assert!((c.precision - p).abs() < 1e-15);
            assert!((c.recall - rcl).abs() < 1e-15);
            assert!((c.f1 - p).abs() < 1e-15);
        }
        assert_eq!(r.accuracy, 5.0 / 8.0);
        assert_eq!(r.n, 8);
    }

    #[test]
    fn csv_has_names() {
        let m = confusion_matrix(&[0, 1], &[0, 0], 2).unwrap();
        let csv = m.to_csv(&["A".into(), "B, C".into()]);
        assert_eq!(csv, "gold\\predicted,A,\"B, C\"\nA,1,1\n\"B, C\",0,0\n");
    }

    proptest! {
        #[test]
        fn report_invariants(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..80)) {
            let (pred, gold): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let r = build_report(&pred, &gold, &vocab(5)).unwrap();
            prop_assert_eq!(r.confusion.trace() as f64 / r.n as f64, r.accuracy);
            prop_assert_eq!(r.accuracy, accuracy(&pred, &gold).unwrap());
            let supports: u64 = r.per_class.iter().map(|c| c.support).sum();
            prop_assert_eq!(supports, r.n);
            for c in &r.per_class {
                prop_assert_eq!(r.confusion.row_sum(c.label), c.support);
                for v in [c.precision, c.recall, c.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
