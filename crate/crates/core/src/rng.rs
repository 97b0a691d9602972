//! Seeded instance generation.
//!
//! Every random matrix is drawn from its own SplitMix64 stream (64-bit state).
//! The stream for `(seed, instance, role)` starts from state
//! `mix64(seed ^ mix64(instance · 2⁸ + role + 1))`, where `mix64` is the
//! SplitMix64 output finalizer. Normal deviates come from `rand_distr`'s
//! `StandardNormal`, uniform ones from `rand`'s `random_range`. The same seed
//! therefore always yields bitwise identical Q, K, V, kernels and test vectors.

use alloc::vec::Vec;

use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

use crate::linalg::{Matrix, Vector};

/// What a stream is used for. Distinct roles never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Query = 0,
    Key = 1,
    Value = 2,
    Kernel = 3,
    X = 4,
    Y = 5,
    Upstream = 6,
    Projection = 7,
    Aux = 8,
}

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, instance: u64, role: Role) -> SplitMix64 {
        let tag = (instance << 8).wrapping_add(role as u64 + 1);
        SplitMix64::seed_from_u64(mix64(self.seed ^ mix64(tag)))
    }

    pub fn normal_matrix(&self, instance: u64, role: Role, rows: usize, cols: usize) -> Matrix {
        normal_matrix(&mut self.rng(instance, role), rows, cols)
    }

    /// Standard-normal Q, K, V of shape `n×d`.
    pub fn qkv(&self, instance: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
        (
            self.normal_matrix(instance, Role::Query, n, d),
            self.normal_matrix(instance, Role::Key, n, d),
            self.normal_matrix(instance, Role::Value, n, d),
        )
    }
}

pub fn normal_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn uniform_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn normal_vector(rng: &mut SplitMix64, len: usize) -> Vector {
    Vector::new((0..len).map(|_| StandardNormal.sample(rng)).collect())
}

pub fn uniform_vector(rng: &mut SplitMix64, len: usize, lo: f64, hi: f64) -> Vector {
    Vector::new((0..len).map(|_| rng.random_range(lo..hi)).collect())
}

/// Entries with magnitude in `[min_abs, max_abs)` and a random sign, keeping
/// every coordinate at least `min_abs` away from the ReLU kink.
pub fn kink_free_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, min_abs: f64, max_abs: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let mag = rng.random_range(min_abs..max_abs);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

pub fn random_index(rng: &mut SplitMix64, len: usize) -> usize {
    rng.random_range(0..len)
}

pub fn uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn collect_uniform(rng: &mut SplitMix64, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
