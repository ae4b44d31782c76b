//! Seeded generators for random embedding batches and kernels.
//!
//! Shared by the property suite behind `gca verify` and the test targets so
//! both draw instances from one distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::kernel::{cosine_cost, gibbs_kernel, normalize_rows, EmbeddingBatch, GibbsKernel};
use crate::matrix::DenseMatrix;

pub type GcaRng = ChaCha8Rng;

pub fn rng(seed: u64) -> GcaRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_unit_batch<R: Rng>(rng: &mut R, b: usize, d: usize) -> EmbeddingBatch {
    loop {
        if let Ok(z) = normalize_rows(&gaussian_matrix(rng, b, d)) {
            return z;
        }
    }
}

/// Positive-pair batch: `z2_i = normalize(z1_i + noise * xi_i)` with Gaussian `xi`.
pub fn random_pair_batch<R: Rng>(
    rng: &mut R,
    b: usize,
    d: usize,
    noise: f64,
) -> (EmbeddingBatch, EmbeddingBatch) {
    let z1 = random_unit_batch(rng, b, d);
    loop {
        let xi = gaussian_matrix(rng, b, d);
        let raw = DenseMatrix::from_fn(b, d, |i, j| z1.matrix()[(i, j)] + noise * xi[(i, j)]);
        if let Ok(z2) = normalize_rows(&raw) {
            return (z1, z2);
        }
    }
}

/// One random instance for the property suite.
#[derive(Debug, Clone)]
pub struct PairInstance {
    pub z1: EmbeddingBatch,
    pub z2: EmbeddingBatch,
    pub epsilon: f64,
    pub noise: f64,
}

impl PairInstance {
    pub fn kernel(&self) -> GibbsKernel {
        let c = cosine_cost(&self.z1, &self.z2).expect("same shape by construction");
        gibbs_kernel(&c, self.epsilon).expect("epsilon drawn positive")
    }
}

pub const EPSILON_GRID: [f64; 3] = [0.1, 0.5, 1.0];

/// Draws `B` in `4..=64`, `d` in `4..=32`, `eps` from [`EPSILON_GRID`] and a
/// view-noise level uniform in `[0, 1]`.
pub fn random_instance<R: Rng>(rng: &mut R) -> PairInstance {
    let b = rng.gen_range(4..=64);
    let d = rng.gen_range(4..=32);
    let epsilon = EPSILON_GRID[rng.gen_range(0..EPSILON_GRID.len())];
    let noise = rng.gen_range(0.0..1.0);
    let (z1, z2) = random_pair_batch(rng, b, d, noise);
    PairInstance {
        z1,
        z2,
        epsilon,
        noise,
    }
}
