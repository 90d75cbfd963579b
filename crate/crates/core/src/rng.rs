//! Seedable random numbers.
//!
//! The generator is xoshiro256** (Blackman & Vigna), with its 256-bit state
//! expanded from a 64-bit seed by SplitMix64, as provided by
//! `rand_xoshiro::Xoshiro256StarStar::seed_from_u64`. Derived values:
//!
//! - `next_f64`: `(next_u64() >> 11) * 2^-53`, uniform on `[0, 1)`.
//! - `below(n)`: `(next_u64() as u128 * n as u128) >> 64` (multiply-shift).
//! - `standard_normal`: Marsaglia's polar method on `u = 2*next_f64() - 1`
//!   pairs; both outputs of an accepted pair are used, the second one is
//!   cached and returned by the next call.
//! - `permutation(n)`: Fisher-Yates, `i` from `n-1` down to `1`, swapping
//!   with `below(i + 1)`.
//!
//! Worker threads never share an `Rng`; they derive child seeds with
//! [`split_seed`].

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256StarStar,
    seed: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
            seed,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`; `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * scale);
                return u * scale;
            }
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of `parent`:
/// `splitmix64(parent ^ splitmix64(index))`.
pub fn split_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index))
}

/// `rows x cols` matrix of i.i.d. draws from `[lo, hi)`, filled in row-major
/// order as `lo + (hi - lo) * next_f64()`.
pub fn uniform_init(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<Matrix, TensorError> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(TensorError::BadRange { lo, hi });
    }
    let width = hi - lo;
    let data = (0..rows * cols)
        .map(|_| lo + width * rng.next_f64())
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// One draw from `N(mean, stddev^2)`.
pub fn gaussian(rng: &mut Rng, mean: f64, stddev: f64) -> Result<f64, TensorError> {
    if stddev < 0.0 || stddev.is_nan() {
        return Err(TensorError::NegativeStddev(stddev));
    }
    Ok(mean + stddev * rng.standard_normal())
}
