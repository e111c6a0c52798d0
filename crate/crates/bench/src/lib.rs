//! Fixtures shared by the benchmarks.

use btc_anomaly::synth::{generate, SynthConfig, SynthLedger};
use btc_anomaly::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Standard-normal `m × n` matrix.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..m * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec(m, n, data).expect("m * n values")
}

pub fn synth_ledger(tx_count: usize, user_count: usize) -> SynthLedger {
    generate(&SynthConfig {
        tx_count,
        user_count,
        seed: 1,
        ..SynthConfig::default()
    })
    .expect("valid synth config")
}
