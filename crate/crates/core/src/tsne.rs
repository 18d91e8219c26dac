//! Exact (O(N^2)) t-SNE to two components.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::csv_field;
use crate::scalar::Scalar;

const Q_FLOOR: f64 = 1e-12;
const MAX_SEARCH_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("perplexity {perplexity} invalid for {n} points")]
    InvalidPerplexity { perplexity: f64, n: usize },
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
    #[error("invalid affinity matrix: {0}")]
    InvalidAffinity(String),
    #[error("coordinates became non-finite at iteration {iteration}")]
    NumericalDivergence { iteration: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub components: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated P and the initial momentum.
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Stratified subsample cap applied by [`project`].
    pub max_points: Option<usize>,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            components: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_std: 1e-4,
            seed: 42,
            max_points: None,
        }
    }
}

impl TsneConfig {
    /// Checks the optimizer settings; with `points`, also the perplexity range
    /// `1 <= perplexity <= (N - 1) / 3`.
    pub fn validate(&self, points: Option<usize>) -> Result<(), TsneError> {
        let bad = |m: &str| Err(TsneError::InvalidConfig(m.into()));
        if self.components != 2 {
            return bad("only 2 components are supported");
        }
        if self.iterations < self.exaggeration_iterations.max(250) {
            return bad("iterations must be >= 250 and cover the exaggeration phase");
        }
        if !(self.learning_rate > 0.0) || !(self.early_exaggeration >= 1.0) || !(self.init_std > 0.0) {
            return bad("learning_rate and init_std must be > 0, exaggeration >= 1");
        }
        if let Some(n) = points {
            if n < 2 {
                return Err(TsneError::TooFewPoints(n));
            }
            if !(self.perplexity >= 1.0 && self.perplexity <= (n as f64 - 1.0) / 3.0) {
                return Err(TsneError::InvalidPerplexity {
                    perplexity: self.perplexity,
                    n,
                });
            }
        }
        Ok(())
    }
}

/// Squared Euclidean distances; symmetric, zero diagonal, never negative.
pub fn pairwise_sq_distances<T: Scalar>(x: ArrayView2<T>) -> Result<Array2<T>, TsneError> {
    let n = x.nrows();
    if n < 2 {
        return Err(TsneError::TooFewPoints(n));
    }
    let gram = x.dot(&x.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = (gram[[i, i]] + gram[[j, j]] - gram[[i, j]] - gram[[i, j]]).max(T::zero());
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration<T> {
    pub sigmas: Array1<T>,
    /// Row i is p_{.|i}; zero diagonal, rows sum to 1.
    pub conditional: Array2<T>,
    /// Rows whose bandwidth search collapsed; they fall back to uniform.
    pub failures: Vec<usize>,
    /// Rows that hit the iteration cap without reaching the tolerance.
    pub unconverged: Vec<usize>,
}

enum RowOutcome {
    Converged,
    Unconverged,
    Failed,
}

/// Entropy in bits of p_j ∝ exp(-beta d_j) over `dists` (self excluded).
fn row_distribution(dists: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (o, &d) in out.iter_mut().zip(dists) {
        let shifted = d - dmin;
        *o = (-beta * shifted).exp();
        sum += *o;
        weighted += *o * shifted;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

fn calibrate_row(dists: &[f64], target_bits: f64, out: &mut [f64]) -> (f64, RowOutcome) {
    let mut beta = 1.0;
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for _ in 0..MAX_SEARCH_STEPS {
        let h = row_distribution(dists, beta, out);
        if !h.is_finite() || !beta.is_finite() || beta <= 0.0 {
            return (beta, RowOutcome::Failed);
        }
        let diff = h - target_bits;
        if diff.abs() < ENTROPY_TOLERANCE {
            return (beta, RowOutcome::Converged);
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = if lo > 0.0 { 0.5 * (beta + lo) } else { beta * 0.5 };
        }
        if hi.is_finite() && lo > 0.0 && hi - lo <= f64::EPSILON * hi {
            return (beta, RowOutcome::Failed);
        }
    }
    let h = row_distribution(dists, beta, out);
    if (h - target_bits).abs() < ENTROPY_TOLERANCE {
        (beta, RowOutcome::Converged)
    } else {
        (beta, RowOutcome::Unconverged)
    }
}

/// Per-point Gaussian bandwidths whose conditional distributions reach the
/// target perplexity `2^H`. The search runs in f64 whatever `T` is.
pub fn calibrate_sigmas<T: Scalar>(distances: ArrayView2<T>, perplexity: f64) -> Result<Calibration<T>, TsneError> {
    let n = distances.nrows();
    if n < 2 {
        return Err(TsneError::TooFewPoints(n));
    }
    if distances.ncols() != n {
        return Err(TsneError::InvalidAffinity("distance matrix is not square".into()));
    }
    if !(perplexity >= 1.0 && perplexity <= (n - 1) as f64) {
        return Err(TsneError::InvalidPerplexity { perplexity, n });
    }
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, f64, RowOutcome)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| distances[[i, j]].as_f64()).collect();
            let mut p = vec![0.0; n - 1];
            let (beta, outcome) = calibrate_row(&dists, target, &mut p);
            if matches!(outcome, RowOutcome::Failed) {
                p.fill(1.0 / (n - 1) as f64);
            }
            (p, beta, outcome)
        })
        .collect();

    let mut conditional = Array2::zeros((n, n));
    let mut sigmas = Array1::zeros(n);
    let mut failures = Vec::new();
    let mut unconverged = Vec::new();
    for (i, (p, beta, outcome)) in rows.into_iter().enumerate() {
        for (slot, j) in (0..n).filter(|&j| j != i).enumerate() {
            conditional[[i, j]] = T::of(p[slot]);
        }
        sigmas[i] = T::of((1.0 / (2.0 * beta)).sqrt());
        match outcome {
            RowOutcome::Converged => {}
            RowOutcome::Unconverged => unconverged.push(i),
            RowOutcome::Failed => failures.push(i),
        }
    }
    Ok(Calibration {
        sigmas,
        conditional,
        failures,
        unconverged,
    })
}

/// Log2 perplexity of each conditional row, recomputed from its entries.
pub fn row_log2_perplexity<T: Scalar>(conditional: ArrayView2<T>) -> Vec<f64> {
    conditional
        .rows()
        .into_iter()
        .map(|row| {
            -row.iter()
                .map(|p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| p * p.log2())
                .sum::<f64>()
        })
        .collect()
}

/// Symmetric joint distribution over pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix<T> {
    p: Array2<T>,
}

impl<T: Scalar> AffinityMatrix<T> {
    /// Validates non-negativity, exact symmetry, zero diagonal and unit mass.
    pub fn new(p: Array2<T>) -> Result<Self, TsneError> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(TsneError::InvalidAffinity("not square".into()));
        }
        if n < 2 {
            return Err(TsneError::TooFewPoints(n));
        }
        let mut total = 0.0;
        for i in 0..n {
            if p[[i, i]] != T::zero() {
                return Err(TsneError::InvalidAffinity(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = p[[i, j]];
                if !(v >= T::zero()) || !v.is_finite() {
                    return Err(TsneError::InvalidAffinity(format!("entry ({i},{j}) = {v}")));
                }
                if v != p[[j, i]] {
                    return Err(TsneError::InvalidAffinity(format!("asymmetric at ({i},{j})")));
                }
                total += v.as_f64();
            }
        }
        let tol = if std::mem::size_of::<T>() == 4 { 1e-4 } else { 1e-8 };
        if (total - 1.0).abs() > tol {
            return Err(TsneError::InvalidAffinity(format!("total mass {total}")));
        }
        Ok(Self { p })
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.p.view()
    }

    pub fn len(&self) -> usize {
        self.p.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.nrows() == 0
    }
}

/// `P_ij = (p_{j|i} + p_{i|j}) / 2N`.
pub fn joint_affinities<T: Scalar>(conditional: ArrayView2<T>) -> Result<AffinityMatrix<T>, TsneError> {
    let n = conditional.nrows();
    if conditional.ncols() != n {
        return Err(TsneError::InvalidAffinity("not square".into()));
    }
    let scale = T::of(2.0 * n as f64);
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = (conditional[[i, j]] + conditional[[j, i]]) / scale;
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    AffinityMatrix::new(p)
}

/// Student-t kernel values for the current layout.
struct Kernel<T> {
    w: Array2<T>,
    z: T,
}

impl<T: Scalar> Kernel<T> {
    fn new(y: ArrayView2<T>) -> Self {
        let n = y.nrows();
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            T::zero()
                        } else {
                            let dx = y[[i, 0]] - y[[j, 0]];
                            let dy = y[[i, 1]] - y[[j, 1]];
                            T::one() / (T::one() + dx * dx + dy * dy)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut w = Array2::zeros((n, n));
        let mut z = T::zero();
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                w[[i, j]] = v;
                z += v;
            }
        }
        Self { w, z }
    }

    #[inline]
    fn q(&self, i: usize, j: usize) -> T {
        (self.w[[i, j]] / self.z).max(T::of(Q_FLOOR))
    }

    fn kl(&self, p: ArrayView2<T>) -> T {
        let n = p.nrows();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let pij = p[[i, j]];
                if i != j && pij > T::zero() {
                    total += pij * (pij / self.q(i, j)).ln();
                }
            }
        }
        total
    }

    /// `4 sum_j (exag P_ij - Q_ij) w_ij (y_i - y_j)`.
    fn gradient(&self, p: ArrayView2<T>, exaggeration: T, y: ArrayView2<T>) -> Array2<T> {
        let n = y.nrows();
        let four = T::of(4.0);
        let rows: Vec<[T; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [T::zero(); 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let coeff = (exaggeration * p[[i, j]] - self.q(i, j)) * self.w[[i, j]];
                    g[0] += coeff * (y[[i, 0]] - y[[j, 0]]);
                    g[1] += coeff * (y[[i, 1]] - y[[j, 1]]);
                }
                [g[0] * four, g[1] * four]
            })
            .collect();
        Array2::from_shape_fn((n, 2), |(i, c)| rows[i][c])
    }
}

/// `sum_{i != j} P_ij ln(P_ij / Q_ij)` with Q from the 2-D `coords`.
pub fn kl_divergence<T: Scalar>(p: &AffinityMatrix<T>, coords: ArrayView2<T>) -> T {
    Kernel::new(coords).kl(p.matrix())
}

/// KL divergence and its gradient with respect to `coords`.
pub fn kl_gradient<T: Scalar>(p: &AffinityMatrix<T>, coords: ArrayView2<T>) -> (T, Array2<T>) {
    let kernel = Kernel::new(coords);
    (kernel.kl(p.matrix()), kernel.gradient(p.matrix(), T::one(), coords))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneRun<T> {
    pub coords: Array2<T>,
    /// KL after each update, measured against the unexaggerated P.
    pub kl_history: Vec<T>,
}

fn recenter<T: Scalar>(y: &mut Array2<T>) {
    let mean = y.mean_axis(Axis(0)).expect("non-empty");
    *y -= &mean;
}

/// Momentum gradient descent on KL(P || Q) from a seeded Gaussian start.
pub fn tsne_optimize<T: Scalar>(p: &AffinityMatrix<T>, config: &TsneConfig) -> Result<TsneRun<T>, TsneError> {
    config.validate(None)?;
    let n = p.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).expect("positive std");
    let mut y = Array2::from_shape_simple_fn((n, 2), || T::of(normal.sample(&mut rng)));
    recenter(&mut y);
    let mut velocity = Array2::<T>::zeros((n, 2));
    let lr = T::of(config.learning_rate);
    let mut kernel = Kernel::new(y.view());
    let mut kl_history = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let early = iteration < config.exaggeration_iterations;
        let exaggeration = T::of(if early { config.early_exaggeration } else { 1.0 });
        let momentum = T::of(if early {
            config.initial_momentum
        } else {
            config.final_momentum
        });
        let grad = kernel.gradient(p.matrix(), exaggeration, y.view());
        velocity = velocity * momentum - grad * lr;
        y += &velocity;
        recenter(&mut y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(TsneError::NumericalDivergence {
                iteration: iteration + 1,
            });
        }
        kernel = Kernel::new(y.view());
        kl_history.push(kernel.kl(p.matrix()));
    }
    Ok(TsneRun { coords: y, kl_history })
}

/// Picks exactly `max_points` indices, allocating per label proportionally
/// (largest remainder) and sampling within each label with a seeded shuffle.
/// Returned indices are sorted.
pub fn stratified_subsample(labels: &[usize], max_points: usize, seed: u64) -> Vec<usize> {
    let n = labels.len();
    if max_points >= n {
        return (0..n).collect();
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let mut quota: Vec<usize> = groups.iter().map(|g| g.len() * max_points / n).collect();
    let mut remainders: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .map(|(c, g)| ((g.len() * max_points) % n, c))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = max_points - quota.iter().sum::<usize>();
    for &(_, c) in remainders.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(max_points);
    for (c, group) in groups.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        group.shuffle(&mut rng);
        chosen.extend_from_slice(&group[..quota[c]]);
    }
    chosen.sort_unstable();
    chosen
}

/// 2-D layout of labelled points, ready to plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub ids: Vec<String>,
    pub coords: Array2<f64>,
    pub labels: Vec<usize>,
    pub kl_history: Vec<f64>,
    /// Calibration rows that fell back to uniform.
    pub calibration_failures: Vec<usize>,
}

impl Projection {
    /// `id,x,y,subject_index,subject_name` rows.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("id,x,y,subject_index,subject_name\n");
        for (i, id) in self.ids.iter().enumerate() {
            let label = self.labels[i];
            let name = names.get(label).map_or("", String::as_str);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(id),
                self.coords[[i, 0]],
                self.coords[[i, 1]],
                label,
                csv_field(name)
            ));
        }
        out
    }

    pub fn kl_csv(&self) -> String {
        let mut out = String::from("iteration,kl\n");
        for (i, kl) in self.kl_history.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, kl));
        }
        out
    }
}

/// Full projection: optional stratified subsample, distances, calibration,
/// joint affinities, optimization.
pub fn project<T: Scalar>(
    x: ArrayView2<T>,
    ids: &[String],
    labels: &[usize],
    config: &TsneConfig,
) -> Result<Projection, TsneError> {
    assert_eq!(x.nrows(), ids.len(), "one id per row");
    assert_eq!(x.nrows(), labels.len(), "one label per row");
    let rows = match config.max_points {
        Some(cap) if cap < x.nrows() => stratified_subsample(labels, cap, config.seed),
        _ => (0..x.nrows()).collect(),
    };
    config.validate(Some(rows.len()))?;
    let xs = x.select(Axis(0), &rows);
    let distances = pairwise_sq_distances(xs.view())?;
    let calibration = calibrate_sigmas(distances.view(), config.perplexity)?;
    let p = joint_affinities(calibration.conditional.view())?;
    let run = tsne_optimize(&p, config)?;
    Ok(Projection {
        ids: rows.iter().map(|&i| ids[i].clone()).collect(),
        coords: run.coords.mapv(|v| v.as_f64()),
        labels: rows.iter().map(|&i| labels[i]).collect(),
        kl_history: run.kl_history.into_iter().map(|v| v.as_f64()).collect(),
        calibration_failures: calibration.failures,
    })
}
