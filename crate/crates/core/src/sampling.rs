//! Seeded random instances.
//!
//! One master seed drives every run. Instance `i` gets its own generator
//! seeded with `master + i * INSTANCE_SEED_STRIDE` so that instances can be
//! regenerated (or run out of order) without replaying the whole stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

pub const INSTANCE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn instance_rng(master: u64, instance: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master.wrapping_add(instance.wrapping_mul(INSTANCE_SEED_STRIDE)))
}

/// Matrix of independent standard normal entries.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_parts(rows, cols, data)
}

/// Matrix of independent uniform entries in `[lo, hi)`.
pub fn uniform_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_parts(rows, cols, data)
}

/// Log-uniform draw from `(lo, hi]` with `lo > 0`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let u: f64 = rng.random_range(0.0..1.0);
        let x = lo * (hi / lo).powf(1.0 - u);
        if x > lo {
            return x.min(hi);
        }
    }
}

/// Query-like matrix whose rows point in random directions and have norms
/// drawn uniformly from `[lo, hi]`.
pub fn matrix_with_row_norms<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Matrix {
    let mut m = normal_matrix(rng, rows, cols);
    for i in 0..rows {
        let target = rng.random_range(lo..=hi);
        let row = m.row_mut(i);
        let norm = crate::numerics::norm(row);
        let factor = if norm > 0.0 { target / norm } else { 0.0 };
        row.iter_mut().for_each(|x| *x *= factor);
    }
    m
}
