//! Lloyd's k-means with k-means++ seeding, and entropy-guided choice of k.
//!
//! k-means is only a reference model here: its clusters anchor the
//! centroid-distance evaluation of the real detectors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::{squared_distance, Matrix};

/// Covariance floor used by [`cluster_entropy`].
pub const ENTROPY_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative objective improvement below which iteration stops.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
    /// Objective after every assignment step, first to last.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c)
    }
}

fn kmeans_pp(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = x.rows();
    let mut centroids = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = x.iter_rows().map(|r| squared_distance(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, row) in x.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(row, x.row(pick)));
        }
    }
    centroids
}

/// Nearest centroid (lowest index on ties) and squared distance.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &Matrix, centroids: &Matrix, assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut objective = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let (c, d) = nearest(row, centroids);
        assignments[i] = c;
        dists[i] = d;
        objective += d;
    }
    objective
}

/// Moves each centroid to the mean of its points. Empty clusters are
/// reseeded at the point farthest from its own centroid.
fn update(x: &Matrix, k: usize, assignments: &[usize], dists: &[f64]) -> Matrix {
    let n = x.cols();
    let mut sums = Matrix::zeros(k, n);
    let mut counts = vec![0usize; k];
    for (i, row) in x.iter_rows().enumerate() {
        let c = assignments[i];
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut taken = vec![false; x.rows()];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for s in sums.row_mut(c) {
                *s *= inv;
            }
        } else {
            let far = (0..x.rows())
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                sums.row_mut(c).copy_from_slice(x.row(i));
            }
        }
    }
    sums
}

/// Within-cluster sum of squares of a partition against given centroids.
pub fn objective(x: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    x.iter_rows()
        .zip(assignments)
        .map(|(r, &c)| squared_distance(r, centroids.row(c)))
        .sum()
}

pub fn fit_kmeans(x: &Matrix, config: &KMeansConfig) -> Result<KMeansModel> {
    let (m, k) = (x.rows(), config.k);
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if k > m {
        return Err(invalid(format!("k = {k} exceeds the {m} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = kmeans_pp(x, k, &mut rng);
    let mut assignments = vec![usize::MAX; m];
    let mut next = vec![0usize; m];
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        let obj = assign(x, &centroids, &mut next, &mut dists);
        let unchanged = next == assignments;
        let improvement = history.last().map(|&prev: &f64| {
            if prev > 0.0 {
                (prev - obj) / prev
            } else {
                0.0
            }
        });
        history.push(obj);
        std::mem::swap(&mut assignments, &mut next);
        centroids = update(x, k, &assignments, &dists);
        if unchanged || improvement.is_some_and(|imp| imp < config.tol) {
            converged = true;
            break;
        }
    }
    let objective = objective(x, &centroids, &assignments);
    Ok(KMeansModel {
        k,
        centroids,
        assignments,
        objective,
        history,
        iterations,
        converged,
    })
}

/// Size-weighted Gaussian entropy of a clustering, plus the entropy of the
/// cluster labels:
///
/// `H = -Σ w_i ln w_i + Σ w_i [(n/2) ln(2πe) + ½ ln det(Σ_i + εI)]`
///
/// with `w_i = m_i / m` and `Σ_i` the population covariance of cluster `i`.
/// The label term is the cost of saying which cluster a point is in; without
/// it, splitting any cluster always lowers the covariance term and the
/// minimum sits at the largest k tried.
pub fn cluster_entropy(model: &KMeansModel, x: &Matrix) -> Result<f64> {
    let (m, n) = (x.rows(), x.cols());
    if m != model.assignments.len() {
        return Err(invalid("model was fit on a different number of points"));
    }
    let sizes = model.cluster_sizes();
    let gaussian_const = 0.5 * n as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let mut total = 0.0;
    for (c, &size) in sizes.iter().enumerate() {
        if size == 0 {
            continue;
        }
        let w = size as f64 / m as f64;
        let mut mean = vec![0.0; n];
        for (row, _) in x.iter_rows().zip(&model.assignments).filter(|(_, &a)| a == c) {
            for (mu, v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        for mu in &mut mean {
            *mu /= size as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for (row, _) in x.iter_rows().zip(&model.assignments).filter(|(_, &a)| a == c) {
            for a in 0..n {
                let da = row[a] - mean[a];
                for b in 0..n {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        cov /= size as f64;
        for a in 0..n {
            cov[(a, a)] += ENTROPY_RIDGE;
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("cluster {c} covariance not positive definite")))?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += w * (gaussian_const + 0.5 * log_det) - w * w.ln();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub k: usize,
    pub entropy: f64,
    /// `entropy` plus [`complexity_penalty`]; this is what `select_k` minimizes.
    pub criterion: f64,
}

/// Per-point parameter cost of a k-cluster Gaussian description:
/// `p ln m / (2m)` with `p = k(n + n(n+1)/2 + 1) − 1` free parameters.
///
/// Without it the entropy of a finite sample keeps falling slowly as
/// clusters are split (a cut disk has less spread than the disk), so
/// well-separated structure can lose to an over-split by a hair.
pub fn complexity_penalty(k: usize, m: usize, n: usize) -> f64 {
    let per_cluster = n + n * (n + 1) / 2 + 1;
    let p = (k * per_cluster - 1) as f64;
    p * (m as f64).ln() / (2.0 * m as f64)
}

/// Fits every k in `[k_min, k_max]` with the same seed and returns the k of
/// least penalized entropy (smallest k on ties) with the full curve.
pub fn select_k(
    x: &Matrix,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<(usize, Vec<EntropyPoint>)> {
    if k_min == 0 || k_min > k_max {
        return Err(invalid(format!("bad k range [{k_min}, {k_max}]")));
    }
    if k_max > x.rows() {
        return Err(invalid(format!("k_max = {k_max} exceeds the {} points", x.rows())));
    }
    let mut curve = Vec::with_capacity(k_max - k_min + 1);
    let mut best: Option<(usize, f64)> = None;
    for k in k_min..=k_max {
        let model = fit_kmeans(x, &KMeansConfig::new(k, seed))?;
        let entropy = cluster_entropy(&model, x)?;
        let criterion = entropy + complexity_penalty(k, x.rows(), x.cols());
        if best.is_none_or(|(_, c)| criterion < c) {
            best = Some((k, criterion));
        }
        curve.push(EntropyPoint { k, entropy, criterion });
    }
    Ok((best.expect("non-empty range").0, curve))
}

/// CSV `k,entropy,criterion`.
pub fn write_entropy_curve<W: std::io::Write>(mut w: W, curve: &[EntropyPoint]) -> Result<()> {
    writeln!(w, "k,entropy,criterion")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.k, p.entropy, p.criterion)?;
    }
    Ok(())
}
