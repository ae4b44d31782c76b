//! Embedding normalization, cost matrices and Gibbs kernels.

use crate::error::{GcaError, Result};
use crate::matrix::{dot, norm, DenseMatrix};

/// Temperature used throughout the training defaults.
pub const DEFAULT_EPSILON: f64 = 0.5;

const UNIT_NORM_TOL: f64 = 1e-12;

/// A batch of embeddings whose rows all have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(DenseMatrix);

impl EmbeddingBatch {
    /// Wraps a matrix whose rows are already unit norm (checked to 1e-12).
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        matrix.ensure_finite()?;
        for (i, row) in matrix.row_iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(GcaError::InvalidParameter(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self(matrix))
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self(self.0.permute_rows(perm))
    }
}

pub fn normalize_rows(matrix: &DenseMatrix) -> Result<EmbeddingBatch> {
    matrix.ensure_finite()?;
    let mut out = matrix.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(GcaError::ZeroRow { row: i });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(EmbeddingBatch(out))
}

/// Nonnegative pairwise cost between two batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DenseMatrix);

impl CostMatrix {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        matrix.ensure_finite()?;
        for i in 0..matrix.rows() {
            for j in 0..matrix.cols() {
                if matrix[(i, j)] < 0.0 {
                    return Err(GcaError::InvalidParameter(format!(
                        "negative cost {} at ({i}, {j})",
                        matrix[(i, j)]
                    )));
                }
            }
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

fn check_same_shape(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.0.shape() != b.0.shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "batches are {:?} and {:?}",
            a.0.shape(),
            b.0.shape()
        )));
    }
    Ok(())
}

/// `C_ij = 1 - <z1_i, z2_j>`, clamped to `[0, 2]`.
pub fn cosine_cost(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<CostMatrix> {
    check_same_shape(z1, z2)?;
    Ok(CostMatrix(cosine_cost_raw(&z1.0, &z2.0)))
}

pub(crate) fn cosine_cost_raw(z1: &DenseMatrix, z2: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(z1.rows(), z2.rows(), |i, j| {
        (1.0 - dot(z1.row(i), z2.row(j))).clamp(0.0, 2.0)
    })
}

/// `C_ij = ||z1_i - z2_j||^2`.
pub fn sqeuclidean_cost(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<CostMatrix> {
    check_same_shape(z1, z2)?;
    Ok(CostMatrix(sqeuclidean_raw(&z1.0, &z2.0)))
}

pub(crate) fn sqeuclidean_raw(z1: &DenseMatrix, z2: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(z1.rows(), z2.rows(), |i, j| {
        z1.row(i)
            .iter()
            .zip(z2.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

/// Strictly positive kernel `K = exp(-C / eps)`.
///
/// The log-kernel `-C/eps` is kept alongside the values so the stabilized
/// solvers can rebuild `exp((f + g - C) / eps)` without losing precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsKernel {
    values: DenseMatrix,
    log_values: DenseMatrix,
    epsilon: f64,
}

impl GibbsKernel {
    /// Wraps an arbitrary strictly positive matrix as a kernel at temperature `epsilon`.
    pub fn from_values(values: DenseMatrix, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        values.ensure_finite()?;
        for i in 0..values.rows() {
            for j in 0..values.cols() {
                let v = values[(i, j)];
                if v <= 0.0 {
                    return Err(GcaError::NonPositive {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
            }
        }
        let log_values = values.map(f64::ln);
        Ok(Self {
            values,
            log_values,
            epsilon,
        })
    }

    pub(crate) fn from_log_values(log_values: DenseMatrix, epsilon: f64) -> Self {
        Self {
            values: log_values.map(f64::exp),
            log_values,
            epsilon,
        }
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    /// `-C / eps` entrywise.
    pub fn log_values(&self) -> &DenseMatrix {
        &self.log_values
    }

    /// The cost `C = -eps log K` this kernel was generated from.
    pub fn cost(&self) -> DenseMatrix {
        self.log_values.scale(-self.epsilon)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(GcaError::InvalidParameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

pub fn gibbs_kernel(cost: &CostMatrix, epsilon: f64) -> Result<GibbsKernel> {
    check_epsilon(epsilon)?;
    Ok(GibbsKernel::from_log_values(
        cost.0.scale(-1.0 / epsilon),
        epsilon,
    ))
}

/// `S_ij = exp(-||q_i - z_j||)` with the plain (unsquared) distance.
pub fn byol_kernel(q: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<GibbsKernel> {
    check_same_shape(q, z2)?;
    let dist = sqeuclidean_raw(&q.0, &z2.0).map(f64::sqrt);
    Ok(GibbsKernel::from_log_values(dist.scale(-1.0), 1.0))
}
