//! One-class ν-SVM with an RBF kernel, trained by SMO.
//!
//! The dual problem is
//!
//! ```text
//! min_α  ½ Σ_i Σ_j α_i α_j K(x_i, x_j)
//! s.t.   0 ≤ α_i ≤ 1/(νm),  Σ_i α_i = 1
//! ```
//!
//! and a point is anomalous when `Σ_i α_i K(x_i, x) < ρ`.

mod kernel;
mod smo;

use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::{dual_evaluation, OwnershipIndex};
use crate::matrix::Matrix;
use crate::ranking::AnomalyRanking;

pub use kernel::{choose_storage, rbf_kernel, KernelRows, KernelStorage, DENSE_POINT_LIMIT};
pub use smo::{SmoSolver, StepOutcome};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Coefficients at or below this are treated as zero.
pub const ALPHA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoConfig {
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    /// Upper bound on pair updates.
    pub max_passes: usize,
    /// Seeds the scan order used to break selection ties.
    pub seed: u64,
    /// Memory budget for kernel rows.
    pub cache_bytes: usize,
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_passes: 10_000_000,
            seed: 0,
            cache_bytes: 512 << 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcSvmParams {
    pub nu: f64,
    pub gamma: f64,
}

impl OcSvmParams {
    /// `γ = 1/n`, matched to z-scored features.
    pub fn with_default_gamma(nu: f64, n_features: usize) -> Self {
        Self {
            nu,
            gamma: 1.0 / n_features.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcSvmModel {
    pub format_version: u32,
    /// Rows with α > ALPHA_EPS.
    pub support_vectors: Matrix,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    /// Training set size.
    pub m: usize,
    pub dual_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// ρ came from the median fallback: no coefficient was strictly inside the box.
    pub rho_fallback: bool,
    /// Largest disagreement between individual ρ recoveries.
    pub rho_spread: f64,
    /// KKT tolerance of the fit. Decision values within it of zero sit on
    /// the margin and are not flagged.
    pub margin: f64,
    pub kernel_storage: KernelStorage,
    /// Indices of the support vectors in the training set.
    pub support_indices: Vec<usize>,
}

impl OcSvmModel {
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.m as f64)
    }

    /// `Σ α_i K(x_i, x)`.
    pub fn kernel_sum(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter_rows()
            .zip(&self.alphas)
            .map(|(sv, a)| a * rbf_kernel(sv, x, self.gamma))
            .sum()
    }

    /// `Σ α_i K(x_i, x) − ρ`; negative means anomalous.
    pub fn decision_value(&self, x: &[f64]) -> f64 {
        self.kernel_sum(x) - self.rho
    }

    pub fn support_count(&self) -> usize {
        self.alphas.len()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let model: OcSvmModel = serde_json::from_reader(r)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(invalid(format!(
                "model format {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        Ok(model)
    }
}

/// Result of recovering ρ from converged coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoRecovery {
    pub rho: f64,
    pub fallback: bool,
    pub spread: f64,
}

/// Recovers ρ from the per-point kernel sums `g_j = Σ_i α_i K(x_i, x_j)`.
///
/// Averages `g_j` over every `j` with `0 < α_j < 1/(νm)`. When no such `j`
/// exists, takes the median of `g_j` over the support vectors instead.
pub fn recover_rho(alphas: &[f64], kernel_sums: &[f64], upper: f64) -> RhoRecovery {
    let interior: Vec<f64> = alphas
        .iter()
        .zip(kernel_sums)
        .filter(|(&a, _)| a > ALPHA_EPS && a < upper - ALPHA_EPS)
        .map(|(_, &g)| g)
        .collect();
    if !interior.is_empty() {
        let rho = interior.iter().sum::<f64>() / interior.len() as f64;
        let spread = interior.iter().map(|g| (g - rho).abs()).fold(0.0, f64::max);
        return RhoRecovery {
            rho,
            fallback: false,
            spread,
        };
    }
    let mut at_bound: Vec<f64> = alphas
        .iter()
        .zip(kernel_sums)
        .filter(|(&a, _)| a > ALPHA_EPS)
        .map(|(_, &g)| g)
        .collect();
    at_bound.sort_by(f64::total_cmp);
    let k = at_bound.len();
    let rho = match k {
        0 => 0.0,
        _ if k % 2 == 1 => at_bound[k / 2],
        _ => 0.5 * (at_bound[k / 2 - 1] + at_bound[k / 2]),
    };
    RhoRecovery {
        rho,
        fallback: true,
        spread: 0.0,
    }
}

pub fn validate_params(params: &OcSvmParams, m: usize) -> Result<()> {
    let nu = params.nu;
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(invalid(format!("nu = {nu} outside (0, 1]")));
    }
    if nu * (m as f64) < 1.0 - 1e-12 {
        return Err(invalid(format!(
            "nu * m = {} < 1: the box and simplex constraints are infeasible",
            nu * m as f64
        )));
    }
    if !(params.gamma > 0.0 && params.gamma.is_finite()) {
        return Err(invalid(format!("gamma = {} must be positive", params.gamma)));
    }
    Ok(())
}

/// Trains a one-class ν-SVM on the rows of `x`.
pub fn fit_ocsvm(x: &Matrix, params: &OcSvmParams, config: &SmoConfig) -> Result<OcSvmModel> {
    let m = x.rows();
    validate_params(params, m)?;
    if config.tol <= 0.0 {
        return Err(invalid("SMO tolerance must be positive"));
    }
    let storage = choose_storage(m, config.cache_bytes);
    let kernel = KernelRows::new(x, params.gamma, storage);
    let mut solver = SmoSolver::new(kernel, params.nu, config.seed);
    let mut converged = false;
    while solver.iterations() < config.max_passes {
        if solver.step(config.tol) == StepOutcome::Converged {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "SMO stopped after {} updates with KKT violation {:.3e}",
            solver.iterations(),
            solver.max_violation()
        );
    }
    let dual_objective = solver.objective();
    let iterations = solver.iterations();
    let alphas_all = solver.into_alphas();
    let support_indices: Vec<usize> = (0..m).filter(|&i| alphas_all[i] > ALPHA_EPS).collect();
    let support_vectors = x.select_rows(&support_indices);
    let alphas: Vec<f64> = support_indices.iter().map(|&i| alphas_all[i]).collect();

    let mut model = OcSvmModel {
        format_version: MODEL_FORMAT_VERSION,
        support_vectors,
        alphas,
        rho: 0.0,
        gamma: params.gamma,
        nu: params.nu,
        m,
        dual_objective,
        converged,
        iterations,
        rho_fallback: false,
        rho_spread: 0.0,
        margin: config.tol,
        kernel_storage: storage,
        support_indices,
    };
    // Fresh kernel sums at the support vectors; the solver's running
    // gradient carries accumulated rounding.
    let sums: Vec<f64> = model
        .support_vectors
        .iter_rows()
        .map(|sv| model.kernel_sum(sv))
        .collect();
    let rec = recover_rho(&model.alphas, &sums, model.upper_bound());
    if rec.fallback {
        warn!("no coefficient strictly inside the box; rho taken as a median");
    }
    model.rho = rec.rho;
    model.rho_fallback = rec.fallback;
    model.rho_spread = rec.spread;
    Ok(model)
}

/// Ranks rows by ascending decision value. A row is flagged when its
/// decision value is below `-margin`; interior support vectors sit at zero
/// only up to the solver tolerance. The score is the negated decision value.
pub fn flag_anomalies(model: &OcSvmModel, x: &Matrix, ids: &[String]) -> Result<AnomalyRanking> {
    if x.cols() != model.support_vectors.cols() {
        return Err(invalid("dimension mismatch"));
    }
    let scores: Vec<f64> = x.iter_rows().map(|r| -model.decision_value(r)).collect();
    let flagged = scores.iter().filter(|&&s| s > model.margin).count();
    Ok(AnomalyRanking::from_scores(ids, &scores, flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuSweepPoint {
    pub nu: f64,
    pub a1: f64,
    pub a2: f64,
    pub m_de: f64,
}

/// Fits both graphs at every candidate ν and keeps the one with the largest
/// dual-evaluation score (earliest candidate on ties).
pub fn tune_nu<U, T>(
    mut user_rank: U,
    mut tx_rank: T,
    candidates: &[f64],
    ownership: &OwnershipIndex,
    top_users: usize,
    top_txs: usize,
) -> Result<(f64, Vec<NuSweepPoint>)>
where
    U: FnMut(f64) -> Result<AnomalyRanking>,
    T: FnMut(f64) -> Result<AnomalyRanking>,
{
    if candidates.is_empty() {
        return Err(invalid("no nu candidates"));
    }
    let mut curve = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, f64)> = None;
    for &nu in candidates {
        let users = user_rank(nu)?;
        let txs = tx_rank(nu)?;
        let de = dual_evaluation(&users, &txs, ownership, top_users, top_txs)?;
        if best.is_none_or(|(_, score)| de.m_de > score) {
            best = Some((nu, de.m_de));
        }
        curve.push(NuSweepPoint {
            nu,
            a1: de.a1,
            a2: de.a2,
            m_de: de.m_de,
        });
    }
    Ok((best.expect("non-empty").0, curve))
}

/// CSV `nu,A1,A2`.
pub fn write_nu_sweep<W: Write>(mut w: W, curve: &[NuSweepPoint]) -> Result<()> {
    writeln!(w, "nu,A1,A2")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.nu, p.a1, p.a2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|i| i.to_string()).collect()
    }

    #[test]
    fn parameter_checks() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let cfg = SmoConfig::default();
        for nu in [0.0, -0.1, 1.5, 0.2] {
            let p = OcSvmParams { nu, gamma: 1.0 };
            assert!(fit_ocsvm(&x, &p, &cfg).is_err(), "nu = {nu}");
        }
        assert!(fit_ocsvm(&x, &OcSvmParams { nu: 0.5, gamma: 0.0 }, &cfg).is_err());
        assert!(fit_ocsvm(&x, &OcSvmParams { nu: 1.0 / 3.0, gamma: 1.0 }, &cfg).is_ok());
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let model = fit_ocsvm(&x, &OcSvmParams { nu: 1.0, gamma: 1.0 }, &SmoConfig::default()).unwrap();
        assert_eq!(model.alphas.len(), 2);
        for a in &model.alphas {
            assert!((a - 0.5).abs() < 1e-12, "{a}");
        }
    }

    #[test]
    fn rho_recovery_paths() {
        // interior recoveries that agree
        let r = recover_rho(&[0.2, 0.3, 0.5], &[0.7, 0.7, 0.7], 0.5);
        assert_eq!(r.rho, 0.7);
        assert!(!r.fallback);
        // interior points 0 and 1; point 2 sits at the bound
        let r = recover_rho(&[0.2, 0.3, 0.5], &[0.6, 0.8, 0.1], 0.5);
        assert!((r.rho - 0.7).abs() < 1e-15);
        assert!((r.spread - 0.1).abs() < 1e-12);
        // everything at a bound
        let r = recover_rho(&[0.5, 0.5, 0.0], &[0.3, 0.9, 5.0], 0.5);
        assert!(r.fallback);
        assert!((r.rho - 0.6).abs() < 1e-15);
    }

    #[test]
    fn all_at_bound_takes_fallback() {
        // nu*m = 2 exactly: two coefficients at 1/2, the rest zero
        let x = Matrix::from_rows(&[[0.0], [0.1], [5.0], [5.1]]).unwrap();
        let model =
            fit_ocsvm(&x, &OcSvmParams { nu: 0.5, gamma: 1.0 }, &SmoConfig::default()).unwrap();
        let sum: f64 = model.alphas.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        if model.alphas.iter().all(|&a| (a - 0.5).abs() < 1e-12) {
            assert!(model.rho_fallback);
        }
    }

    #[test]
    fn far_point_is_flagged() {
        let rows: Vec<[f64; 2]> = (0..30).map(|i| [(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let model =
            fit_ocsvm(&x, &OcSvmParams { nu: 0.1, gamma: 10.0 }, &SmoConfig::default()).unwrap();
        let v = model.decision_value(&[50.0, 50.0]);
        assert!((v + model.rho).abs() < 1e-12);
        assert!(v < 0.0);
    }

    #[test]
    fn identical_points() {
        let x = Matrix::from_rows(&vec![[1.0, 1.0]; 20]).unwrap();
        let nu = 0.1;
        let model = fit_ocsvm(&x, &OcSvmParams { nu, gamma: 1.0 }, &SmoConfig::default()).unwrap();
        let r = flag_anomalies(&model, &x, &ids(20)).unwrap();
        assert_eq!(r.len(), 20);
        assert!(r.flagged_count as f64 <= nu * 20.0 + 1.0);
    }

    #[test]
    fn model_round_trip() {
        let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [2.0, 2.0]]).unwrap();
        let model =
            fit_ocsvm(&x, &OcSvmParams { nu: 0.5, gamma: 0.5 }, &SmoConfig::default()).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = OcSvmModel::load(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.decision_value(&[0.3, 0.3]), model.decision_value(&[0.3, 0.3]));

        let mut v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        v["format_version"] = 99.into();
        assert!(OcSvmModel::load(v.to_string().as_bytes()).is_err());
    }

    #[test]
    fn nu_sweep_csv() {
        let mut buf = Vec::new();
        write_nu_sweep(&mut buf, &[NuSweepPoint { nu: 0.005, a1: 0.5, a2: 0.25, m_de: 0.375 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "nu,A1,A2\n0.005,0.5,0.25\n");
    }
}
