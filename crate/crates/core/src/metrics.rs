//! Representation diagnostics.

use crate::error::{GcaError, Result};
use crate::kernel::EmbeddingBatch;
use crate::matrix::DenseMatrix;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance between positive pairs.
pub fn alignment_loss(z1: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<f64> {
    if z1.matrix().shape() != z2.matrix().shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "batches {:?} and {:?} differ",
            z1.matrix().shape(),
            z2.matrix().shape()
        )));
    }
    let b = z1.batch_size();
    if b == 0 {
        return Err(GcaError::DimensionMismatch("empty batch".into()));
    }
    let total: f64 = (0..b).map(|i| squared_distance(z1.row(i), z2.row(i))).sum();
    Ok(total / b as f64)
}

/// `log mean_{i != j} exp(-t |z_i - z_j|^2)` over ordered pairs.
pub fn uniformity_loss(z: &EmbeddingBatch, t: f64) -> Result<f64> {
    let b = z.batch_size();
    if b < 2 {
        return Err(GcaError::InvalidParameter(format!(
            "uniformity needs at least 2 rows, got {b}"
        )));
    }
    // log-sum-exp over pairs; each unordered pair counted twice cancels in the mean
    let exponents: Vec<f64> = (0..b)
        .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| -t * squared_distance(z.row(i), z.row(j)))
        .collect();
    let m = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = exponents.iter().map(|e| (e - m).exp()).sum::<f64>() / exponents.len() as f64;
    Ok(m + mean.ln())
}

/// Mean distance of each point to its class centroid. Labels index classes
/// `0..k`; every class in that range must be populated.
pub fn compactness(points: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != points.rows() {
        return Err(GcaError::DimensionMismatch(format!(
            "{} labels for {} points",
            labels.len(),
            points.rows()
        )));
    }
    if labels.is_empty() {
        return Err(GcaError::DimensionMismatch("no points".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut centroids = DenseMatrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (row, &c) in points.row_iter().zip(labels) {
        counts[c] += 1;
        centroids.row_mut(c).iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(GcaError::EmptyClass(c as i64));
    }
    for (c, &n) in counts.iter().enumerate() {
        centroids.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
    }
    let total: f64 = points
        .row_iter()
        .zip(labels)
        .map(|(row, &c)| squared_distance(row, centroids.row(c)).sqrt())
        .sum();
    Ok(total / labels.len() as f64)
}

/// `(sum_i C_ii - sum_i (f_i + g_i)) / eps`, the identity-target KL read off
/// the dual potentials.
pub fn kl_via_duals(cost: &DenseMatrix, f: &[f64], g: &[f64], epsilon: f64) -> Result<f64> {
    let b = cost.rows();
    if !cost.is_square() || f.len() != b || g.len() != b {
        return Err(GcaError::DimensionMismatch(format!(
            "cost {:?} with potentials of length {} and {}",
            cost.shape(),
            f.len(),
            g.len()
        )));
    }
    let diag: f64 = cost.diag().iter().sum();
    let potentials: f64 = f.iter().zip(g).map(|(a, b)| a + b).sum();
    Ok((diag - potentials) / epsilon)
}
