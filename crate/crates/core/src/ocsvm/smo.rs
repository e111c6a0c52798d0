use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernel::KernelRows;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    Converged,
}

/// SMO state for the one-class dual.
///
/// Each step moves mass from a coefficient that may decrease to one that
/// may increase, choosing the pair by maximal violation with second-order
/// gain, so the equality `Σα = 1` holds after every update.
pub struct SmoSolver<'a> {
    kernel: KernelRows<'a>,
    alpha: Vec<f64>,
    /// Gradient of the dual objective, `Kα`.
    grad: Vec<f64>,
    upper: f64,
    order: Vec<usize>,
    iterations: usize,
    last_violation: f64,
}

impl<'a> SmoSolver<'a> {
    /// Starts from the standard feasible point: the first ⌊νm⌋ coefficients
    /// at the upper bound `1/(νm)` and the leftover mass on the next one.
    pub fn new(mut kernel: KernelRows<'a>, nu: f64, seed: u64) -> Self {
        let m = kernel.len();
        let upper = 1.0 / (nu * m as f64);
        let mut alpha = vec![0.0; m];
        let full = ((nu * m as f64 + 1e-9).floor() as usize).min(m);
        for a in alpha.iter_mut().take(full) {
            *a = upper;
        }
        let rest = 1.0 - full as f64 * upper;
        if full < m && rest > 0.0 {
            alpha[full] = rest;
        }
        let mut grad = vec![0.0; m];
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                let row = kernel.row(i);
                for (g, k) in grad.iter_mut().zip(row.iter()) {
                    *g += a * k;
                }
            }
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            kernel,
            alpha,
            grad,
            upper,
            order,
            iterations: 0,
            last_violation: f64::INFINITY,
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn into_alphas(self) -> Vec<f64> {
        self.alpha
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn max_violation(&self) -> f64 {
        self.last_violation
    }

    /// Running gradient `Kα`.
    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    /// `½ αᵀKα` from the running gradient.
    pub fn objective(&self) -> f64 {
        0.5 * self.alpha.iter().zip(&self.grad).map(|(a, g)| a * g).sum::<f64>()
    }

    pub fn kernel(&self) -> &KernelRows<'a> {
        &self.kernel
    }

    /// Performs one pair update, or reports convergence when the maximal
    /// KKT violation is below `tol`.
    pub fn step(&mut self, tol: f64) -> StepOutcome {
        // i: may increase, smallest gradient
        let mut i = usize::MAX;
        let mut g_min = f64::INFINITY;
        // largest gradient among coefficients that may decrease
        let mut g_max = f64::NEG_INFINITY;
        for &t in &self.order {
            let (a, g) = (self.alpha[t], self.grad[t]);
            if a < self.upper && g < g_min {
                g_min = g;
                i = t;
            }
            if a > 0.0 && g > g_max {
                g_max = g;
            }
        }
        self.last_violation = g_max - g_min;
        if i == usize::MAX || self.last_violation < tol {
            return StepOutcome::Converged;
        }
        let k_i = self.kernel.row(i);
        let mut j = usize::MAX;
        let mut best_gain = f64::NEG_INFINITY;
        for &t in &self.order {
            if self.alpha[t] <= 0.0 || t == i {
                continue;
            }
            let b = self.grad[t] - g_min;
            if b <= 0.0 {
                continue;
            }
            let eta = (2.0 - 2.0 * k_i[t]).max(TAU);
            let gain = b * b / eta;
            if gain > best_gain {
                best_gain = gain;
                j = t;
            }
        }
        if j == usize::MAX {
            return StepOutcome::Converged;
        }
        let k_j = self.kernel.row(j);
        let eta = (2.0 - 2.0 * k_i[j]).max(TAU);
        let room_i = self.upper - self.alpha[i];
        let room_j = self.alpha[j];
        let mut delta = (self.grad[j] - self.grad[i]) / eta;
        if delta >= room_i.min(room_j) {
            delta = room_i.min(room_j);
            if room_i <= room_j {
                self.alpha[j] -= delta;
                self.alpha[i] = self.upper;
            } else {
                self.alpha[i] += delta;
                self.alpha[j] = 0.0;
            }
        } else {
            self.alpha[i] += delta;
            self.alpha[j] -= delta;
        }
        // keep rounding from pushing a coefficient past the box
        self.alpha[i] = self.alpha[i].min(self.upper);
        self.alpha[j] = self.alpha[j].max(0.0);
        for ((g, ki), kj) in self.grad.iter_mut().zip(k_i.iter()).zip(k_j.iter()) {
            *g += delta * (ki - kj);
        }
        self.iterations += 1;
        StepOutcome::Updated
    }
}
