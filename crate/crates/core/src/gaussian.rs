//! Multivariate Gaussian density fit and Mahalanobis-distance flagging.
//!
//! Everything is computed in log space: for six features the raw density
//! of an outlier underflows long before its rank becomes uninteresting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::ranking::AnomalyRanking;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal loading added to the covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// `1e-6 · trace(Σ) / n`, or `1e-6` when the trace is zero.
    #[default]
    Relative,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct GaussianModel {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub ridge: f64,
    pub log_det: f64,
    pub precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)`, via the Cholesky factor.
    pub fn squared_mahalanobis(&self, x: &[f64]) -> f64 {
        let mut d = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        self.chol.l_dirty().solve_lower_triangular_mut(&mut d);
        d.norm_squared()
    }

    pub fn mahalanobis_distance(&self, x: &[f64]) -> f64 {
        self.squared_mahalanobis(x).sqrt()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_from_sq(self.squared_mahalanobis(x))
    }

    fn log_density_from_sq(&self, d2: f64) -> f64 {
        -0.5 * self.dim() as f64 * LN_2PI - 0.5 * self.log_det - 0.5 * d2
    }
}

/// Maximum-likelihood mean and (population) covariance, plus a ridge.
pub fn fit_gaussian(x: &Matrix, ridge: Ridge) -> Result<GaussianModel> {
    let (m, n) = (x.rows(), x.cols());
    if m < 2 {
        return Err(invalid(format!("need at least 2 points, got {m}")));
    }
    if n == 0 {
        return Err(invalid("no features"));
    }
    let mut mean: DVector<f64> = DVector::zeros(n);
    for row in x.iter_rows() {
        for (mu, v) in mean.iter_mut().zip(row) {
            *mu += v;
        }
    }
    mean /= m as f64;
    let mut cov: DMatrix<f64> = DMatrix::zeros(n, n);
    for row in x.iter_rows() {
        for a in 0..n {
            let da = row[a] - mean[a];
            for b in a..n {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..n {
        for b in a..n {
            let v = cov[(a, b)] / m as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let ridge = match ridge {
        Ridge::Relative => {
            let r = 1e-6 * cov.trace() / n as f64;
            if r > 0.0 {
                r
            } else {
                1e-6
            }
        }
        Ridge::Fixed(r) if r >= 0.0 => r,
        Ridge::Fixed(r) => return Err(invalid(format!("negative ridge {r}"))),
    };
    for a in 0..n {
        cov[(a, a)] += ridge;
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let precision = chol.inverse();
    Ok(GaussianModel {
        mean,
        covariance: cov,
        ridge,
        log_det,
        precision,
        chol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Flag points whose density is below ε.
    Epsilon(f64),
    /// Flag the lowest-density fraction q of the points.
    Quantile(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Quantile(0.01)
    }
}

/// Number of points flagged by a quantile threshold.
pub fn quantile_count(q: f64, m: usize) -> usize {
    // a hair of slack so that 0.07 * 100 counts as 7, not 8
    ((q * m as f64 - 1e-9).ceil().max(0.0) as usize).min(m)
}

/// Scores every row by Mahalanobis distance (descending) and flags per the
/// threshold. Training and scoring use the same rows.
pub fn flag_anomalies(
    model: &GaussianModel,
    x: &Matrix,
    ids: &[String],
    threshold: Threshold,
) -> Result<AnomalyRanking> {
    if x.cols() != model.dim() {
        return Err(invalid("dimension mismatch"));
    }
    let d2: Vec<f64> = x.iter_rows().map(|r| model.squared_mahalanobis(r)).collect();
    let flagged = match threshold {
        Threshold::Quantile(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(invalid(format!("quantile {q} outside (0, 1]")));
            }
            quantile_count(q, x.rows())
        }
        Threshold::Epsilon(eps) => {
            if eps < 0.0 {
                return Err(invalid(format!("negative density threshold {eps}")));
            }
            let ln_eps = eps.ln();
            d2.iter()
                .filter(|&&d| model.log_density_from_sq(d) < ln_eps)
                .count()
        }
    };
    let scores: Vec<f64> = d2.iter().map(|d| d.sqrt()).collect();
    Ok(AnomalyRanking::from_scores(ids, &scores, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|i| i.to_string()).collect()
    }

    #[test]
    fn two_point_fit() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let g = fit_gaussian(&x, Ridge::Fixed(0.0) ).unwrap_err();
        // raw covariance [[1,1],[1,1]] is singular without a ridge
        assert!(matches!(g, Error::Numerical(_)));
        let g = fit_gaussian(&x, Ridge::Relative).unwrap();
        assert_eq!(g.mean.as_slice(), &[1.0, 1.0]);
        let r = g.ridge;
        assert!((r - 1e-6).abs() < 1e-18);
        assert!((g.covariance[(0, 0)] - (1.0 + r)).abs() < 1e-15);
        assert_eq!(g.covariance[(0, 1)], 1.0);
    }

    #[test]
    fn identical_rows() {
        let x = Matrix::from_rows(&vec![[3.0, -1.0]; 5]).unwrap();
        let g = fit_gaussian(&x, Ridge::Relative).unwrap();
        assert_eq!(g.mean.as_slice(), &[3.0, -1.0]);
        assert_eq!(g.covariance, DMatrix::identity(2, 2) * g.ridge);
    }

    #[test]
    fn too_few_points() {
        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        assert!(fit_gaussian(&x, Ridge::Relative).is_err());
    }

    fn diag_model(var: &[f64], mean: &[f64]) -> GaussianModel {
        // two points per axis at mean ± sqrt(var) give exactly this covariance
        let n = var.len();
        let mut rows = Vec::new();
        for a in 0..n {
            for s in [-1.0, 1.0] {
                let mut r = mean.to_vec();
                r[a] += s * (var[a] * n as f64).sqrt();
                rows.push(r);
            }
        }
        fit_gaussian(&Matrix::from_rows(&rows).unwrap(), Ridge::Fixed(0.0)).unwrap()
    }

    #[test]
    fn unit_covariance_density() {
        let g = diag_model(&[1.0, 1.0], &[0.5, -0.5]);
        assert!((g.log_density(&[0.5, -0.5]) + LN_2PI).abs() < 1e-12);
        assert!(g.mahalanobis_distance(&[0.5, -0.5]) < 1e-12);
        let d = g.mahalanobis_distance(&[3.5, 3.5]);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_density() {
        let g = diag_model(&[1.0], &[2.0]);
        let expected = -0.5 * LN_2PI - 0.5;
        assert!((g.log_density(&[3.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn scaled_axis_distance() {
        let g = diag_model(&[4.0, 1.0], &[0.0, 0.0]);
        assert!((g.mahalanobis_distance(&[2.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thresholds() {
        let rows: Vec<[f64; 2]> = (0..20).map(|i| [i as f64, ((i * 7) % 5) as f64]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let g = fit_gaussian(&x, Ridge::Relative).unwrap();
        let all = flag_anomalies(&g, &x, &ids(20), Threshold::Quantile(1.0)).unwrap();
        assert_eq!(all.flagged_count, 20);
        let none = flag_anomalies(&g, &x, &ids(20), Threshold::Epsilon(0.0)).unwrap();
        assert_eq!(none.flagged_count, 0);
        for q in [0.0, 1.5, -0.1] {
            assert!(flag_anomalies(&g, &x, &ids(20), Threshold::Quantile(q)).is_err());
        }
        let huge = flag_anomalies(&g, &x, &ids(20), Threshold::Epsilon(1.0)).unwrap();
        assert_eq!(huge.flagged_count, 20);
    }

    #[test]
    fn quantile_counts() {
        assert_eq!(quantile_count(0.01, 100), 1);
        assert_eq!(quantile_count(0.07, 100), 7);
        assert_eq!(quantile_count(0.01, 150), 2);
        assert_eq!(quantile_count(1.0, 3), 3);
    }
}
