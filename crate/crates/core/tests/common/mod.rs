//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use btc_anomaly::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    let data: Vec<f64> = (0..m * n).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(m, n, data).unwrap()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// Determinant by elimination.
pub fn dense_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if piv != col {
            m.swap(col, piv);
            det = -det;
        }
        det *= m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    det
}

pub fn rbf(x: &[f64], z: &[f64], gamma: f64) -> f64 {
    let d: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d).exp()
}

/// Euclidean projection onto `{0 ≤ a_i ≤ c, Σ a_i = 1}` by bisection on the
/// shift τ in `a_i = clip(v_i − τ, 0, c)`.
pub fn project_box_simplex(v: &[f64], c: f64) -> Vec<f64> {
    let total = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, c)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    v.iter().map(|x| (x - tau).clamp(0.0, c)).collect()
}

pub struct QpSolution {
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub rho: f64,
}

/// Brute-force one-class dual: projected gradient on the box-simplex with
/// step 1/L, L = trace(K) ≥ λ_max.
pub fn brute_force_ocsvm(x: &Matrix, nu: f64, gamma: f64, iterations: usize) -> QpSolution {
    let m = x.rows();
    let k: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| rbf(x.row(i), x.row(j), gamma)).collect())
        .collect();
    let c = 1.0 / (nu * m as f64);
    let step = 1.0 / m as f64;
    let mut a = project_box_simplex(&vec![1.0 / m as f64; m], c);
    for _ in 0..iterations {
        let g: Vec<f64> = (0..m).map(|i| (0..m).map(|j| k[i][j] * a[j]).sum()).collect();
        let v: Vec<f64> = a.iter().zip(&g).map(|(ai, gi)| ai - step * gi).collect();
        let next = project_box_simplex(&v, c);
        let change = next.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        a = next;
        if change < 1e-16 {
            break;
        }
    }
    let g: Vec<f64> = (0..m).map(|i| (0..m).map(|j| k[i][j] * a[j]).sum()).collect();
    let objective = 0.5 * a.iter().zip(&g).map(|(ai, gi)| ai * gi).sum::<f64>();
    let interior: Vec<f64> = (0..m)
        .filter(|&j| a[j] > 1e-9 && a[j] < c - 1e-9)
        .map(|j| g[j])
        .collect();
    let rho = if interior.is_empty() {
        let mut s: Vec<f64> = (0..m).filter(|&j| a[j] > 1e-9).map(|j| g[j]).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
    } else {
        interior.iter().sum::<f64>() / interior.len() as f64
    };
    QpSolution { alpha: a, objective, rho }
}

pub fn oracle_decision(x: &Matrix, sol: &QpSolution, gamma: f64, q: &[f64]) -> f64 {
    x.iter_rows()
        .zip(&sol.alpha)
        .map(|(r, a)| a * rbf(r, q, gamma))
        .sum::<f64>()
        - sol.rho
}
