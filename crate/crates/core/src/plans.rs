//! Target transport plans.
//!
//! Targets are scaled to total mass `B` so they compare against solver plans
//! computed with unit marginals, which carry the same mass.

use crate::error::{GcaError, Result};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPlan {
    matrix: DenseMatrix,
    mass: f64,
}

impl TargetPlan {
    /// Validates a square nonnegative matrix with positive diagonal; the mass
    /// is its entry sum.
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(GcaError::DimensionMismatch(format!(
                "target plan must be square, got {:?}",
                matrix.shape()
            )));
        }
        matrix.ensure_finite()?;
        for i in 0..matrix.rows() {
            for j in 0..matrix.cols() {
                let x = matrix[(i, j)];
                if x < 0.0 || (i == j && x <= 0.0) {
                    return Err(GcaError::NonPositive {
                        row: i,
                        col: j,
                        value: x,
                    });
                }
            }
        }
        let mass = matrix.sum();
        Ok(Self { matrix, mass })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == DenseMatrix::identity(self.size())
    }

    pub fn permute(&self, perm: &[usize]) -> Self {
        Self {
            matrix: self.matrix.permute_both(perm),
            mass: self.mass,
        }
    }
}

pub fn identity_plan(b: usize) -> Result<TargetPlan> {
    if b < 2 {
        return Err(GcaError::InvalidParameter(format!(
            "identity plan needs at least 2 rows, got {b}"
        )));
    }
    TargetPlan::new(DenseMatrix::identity(b))
}

/// `I + alpha [same domain, off-diagonal] + beta [different domain]`, before
/// any normalization.
pub fn raw_domain_plan(domains: &[i64], alpha: f64, beta: f64) -> Result<DenseMatrix> {
    for (name, w) in [("alpha", alpha), ("beta", beta)] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(GcaError::InvalidParameter(format!(
                "{name} must be nonnegative, got {w}"
            )));
        }
    }
    if domains.is_empty() {
        return Err(GcaError::InvalidParameter(
            "at least one domain label is required".into(),
        ));
    }
    let n = domains.len();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if domains[i] == domains[j] {
            alpha
        } else {
            beta
        }
    }))
}

/// Domain-structured target rescaled to mass `B`.
pub fn block_domain_plan(domains: &[i64], alpha: f64, beta: f64) -> Result<TargetPlan> {
    let raw = raw_domain_plan(domains, alpha, beta)?;
    normalize_plan(&raw, domains.len() as f64)
}

pub fn normalize_plan(raw: &DenseMatrix, target_mass: f64) -> Result<TargetPlan> {
    if !(target_mass > 0.0 && target_mass.is_finite()) {
        return Err(GcaError::InvalidParameter(format!(
            "target mass must be positive, got {target_mass}"
        )));
    }
    let total = raw.sum();
    if !(total > 0.0) {
        return Err(GcaError::ZeroSum {
            axis: "matrix",
            index: 0,
        });
    }
    let mut plan = TargetPlan::new(raw.scale(target_mass / total))?;
    plan.mass = target_mass;
    Ok(plan)
}
