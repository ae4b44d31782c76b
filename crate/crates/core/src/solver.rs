//! Balanced entropic optimal transport.
//!
//! Alternating row and column Bregman projections of a Gibbs kernel
//! (Sinkhorn scaling), with the absorption scheme that moves large scalings
//! into the dual potentials so the working kernel never overflows.
//!
//! One *iteration* is a row update followed by a column update. Every
//! half-step is recorded in the trajectory, so `trajectory[2t - 2]` is the
//! plan built from `u^(t)` and `v^(t-1)` and `trajectory[2t - 1]` the one
//! built from `u^(t)` and `v^(t)`.

use crate::error::{GcaError, Result};
use crate::kernel::GibbsKernel;
use crate::matrix::DenseMatrix;

/// Row and column target masses.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    mu: Vec<f64>,
    nu: Vec<f64>,
}

impl Marginals {
    /// One unit of mass per sample on both sides (total mass `b`).
    pub fn uniform(b: usize) -> Self {
        Self {
            mu: vec![1.0; b],
            nu: vec![1.0; b],
        }
    }

    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        for (name, v) in [("mu", &mu), ("nu", &nu)] {
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0 && x.is_finite())) {
                return Err(GcaError::InvalidParameter(format!(
                    "{name}[{i}] = {x} must be positive and finite"
                )));
            }
        }
        Ok(Self { mu, nu })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        Self {
            mu: perm.iter().map(|&p| self.mu[p]).collect(),
            nu: self.nu.clone(),
        }
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.mu.len() != rows || self.nu.len() != cols {
            return Err(GcaError::DimensionMismatch(format!(
                "marginals of length ({}, {}) for a {rows}x{cols} problem",
                self.mu.len(),
                self.nu.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Run exactly `max_iterations` iterations.
    FixedIterations,
    /// Stop once both L1 marginal residuals are within `tolerance`, or at `max_iterations`.
    ToTolerance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Scalings above this value are absorbed into the potentials.
    pub absorption_threshold: f64,
    /// Added to every scaling denominator.
    pub floor: f64,
    pub mode: StopRule,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            tolerance: 1e-6,
            absorption_threshold: 1e3,
            floor: 1e-30,
            mode: StopRule::FixedIterations,
        }
    }
}

impl SolverOptions {
    pub fn to_tolerance(tolerance: f64, max_iterations: usize) -> Self {
        Self {
            max_iterations,
            tolerance,
            mode: StopRule::ToTolerance,
            ..Self::default()
        }
    }

    pub fn fixed(iterations: usize) -> Self {
        Self {
            max_iterations: iterations,
            ..Self::default()
        }
    }

    /// Disables absorption; the plain scaling iteration.
    pub fn without_absorption(mut self) -> Self {
        self.absorption_threshold = f64::INFINITY;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(GcaError::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(GcaError::InvalidParameter("tolerance must be positive".into()));
        }
        if !(self.absorption_threshold > 1.0) {
            return Err(GcaError::InvalidParameter(
                "absorption threshold must exceed 1".into(),
            ));
        }
        if !(self.floor >= 0.0 && self.floor.is_finite()) {
            return Err(GcaError::InvalidParameter("floor must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Scaling vectors and their dual potentials, `u = exp(f / eps)`, `v = exp(g / eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub iterations: usize,
}

impl ScalingState {
    pub fn from_potentials(f: Vec<f64>, g: Vec<f64>, epsilon: f64, iterations: usize) -> Self {
        let u = f.iter().map(|x| (x / epsilon).exp()).collect();
        let v = g.iter().map(|x| (x / epsilon).exp()).collect();
        Self {
            u,
            v,
            f,
            g,
            epsilon,
            iterations,
        }
    }

    /// `diag(u) K diag(v)` evaluated in the log domain.
    pub fn plan(&self, kernel: &GibbsKernel) -> DenseMatrix {
        plan_from_potentials(kernel, &self.f, &self.g)
    }

    pub fn potential_sum(&self) -> f64 {
        self.f.iter().sum::<f64>() + self.g.iter().sum::<f64>()
    }
}

pub(crate) fn plan_from_potentials(kernel: &GibbsKernel, f: &[f64], g: &[f64]) -> DenseMatrix {
    let eps = kernel.epsilon();
    let lk = kernel.log_values();
    DenseMatrix::from_fn(lk.rows(), lk.cols(), |i, j| {
        (lk[(i, j)] + (f[i] + g[j]) / eps).exp()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: DenseMatrix,
    pub epsilon: f64,
    pub converged: bool,
    pub row_residual: f64,
    pub col_residual: f64,
}

impl TransportPlan {
    pub fn mass(&self) -> f64 {
        self.plan.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStepKind {
    Row,
    Col,
}

/// State after one half-step; `index` counts half-steps from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfStep {
    pub index: usize,
    pub kind: HalfStepKind,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub row_residual: f64,
    pub col_residual: f64,
}

impl HalfStep {
    pub fn plan(&self, kernel: &GibbsKernel) -> DenseMatrix {
        plan_from_potentials(kernel, &self.f, &self.g)
    }

    pub fn state(&self, epsilon: f64) -> ScalingState {
        ScalingState::from_potentials(self.f.clone(), self.g.clone(), epsilon, self.index.div_ceil(2))
    }

    pub fn potential_sum(&self) -> f64 {
        self.f.iter().sum::<f64>() + self.g.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    pub state: ScalingState,
    pub trajectory: Vec<HalfStep>,
}

pub(crate) fn check_kernel(kernel: &GibbsKernel) -> Result<()> {
    // entries may underflow to zero at small eps; the stabilized iteration
    // rebuilds them from the log values, which must stay finite
    let logs = kernel.log_values();
    for i in 0..logs.rows() {
        for j in 0..logs.cols() {
            let x = logs[(i, j)];
            if !x.is_finite() {
                return Err(GcaError::NonPositive {
                    row: i,
                    col: j,
                    value: kernel.values()[(i, j)],
                });
            }
        }
    }
    Ok(())
}

/// Stabilized scaling iteration. The true scalings are
/// `exp(f_abs / eps) * u` and `exp(g_abs / eps) * v`; `work` holds
/// `exp((f_abs_i + g_abs_j - C_ij) / eps)`.
#[derive(Debug, Clone)]
pub(crate) struct ScalingEngine<'a> {
    kernel: &'a GibbsKernel,
    pub(crate) work: DenseMatrix,
    pub(crate) f_abs: Vec<f64>,
    pub(crate) g_abs: Vec<f64>,
    pub(crate) u: Vec<f64>,
    pub(crate) v: Vec<f64>,
    threshold: f64,
    floor: f64,
    pub(crate) half_steps: usize,
}

impl<'a> ScalingEngine<'a> {
    pub(crate) fn new(kernel: &'a GibbsKernel, threshold: f64, floor: f64) -> Self {
        let (r, c) = kernel.shape();
        Self {
            kernel,
            work: kernel.values().clone(),
            f_abs: vec![0.0; r],
            g_abs: vec![0.0; c],
            u: vec![1.0; r],
            v: vec![1.0; c],
            threshold,
            floor,
            half_steps: 0,
        }
    }

    pub(crate) fn iteration(&self) -> usize {
        self.half_steps.div_ceil(2)
    }

    pub(crate) fn row_update(&mut self, mu: &[f64], exponent: f64, damping: f64) -> Result<()> {
        let kv = self.work.matvec(&self.v);
        let eps = self.kernel.epsilon();
        for i in 0..self.u.len() {
            let ratio = mu[i] / (kv[i] + self.floor);
            self.u[i] = if exponent == 1.0 {
                ratio
            } else {
                ratio.powf(exponent) * (-self.f_abs[i] / (eps + damping)).exp()
            };
        }
        self.half_steps += 1;
        self.check_finite()
    }

    pub(crate) fn col_update(&mut self, nu: &[f64], exponent: f64, damping: f64) -> Result<()> {
        let ktu = self.work.matvec_t(&self.u);
        let eps = self.kernel.epsilon();
        for j in 0..self.v.len() {
            let ratio = nu[j] / (ktu[j] + self.floor);
            self.v[j] = if exponent == 1.0 {
                ratio
            } else {
                ratio.powf(exponent) * (-self.g_abs[j] / (eps + damping)).exp()
            };
        }
        self.half_steps += 1;
        self.check_finite()
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |x: &f64| !(x.is_finite() && *x > 0.0);
        if self.u.iter().any(bad) || self.v.iter().any(bad) {
            return Err(GcaError::Overflow {
                iteration: self.iteration(),
            });
        }
        Ok(())
    }

    /// Moves `u`, `v` into the potentials when either exceeds the threshold.
    pub(crate) fn maybe_absorb(&mut self) -> Result<bool> {
        let t = self.threshold;
        if !(self.u.iter().any(|&x| x > t) || self.v.iter().any(|&x| x > t)) {
            return Ok(false);
        }
        let eps = self.kernel.epsilon();
        for (f, u) in self.f_abs.iter_mut().zip(&mut self.u) {
            *f += eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g_abs.iter_mut().zip(&mut self.v) {
            *g += eps * v.ln();
            *v = 1.0;
        }
        let lk = self.kernel.log_values();
        let (f_abs, g_abs) = (&self.f_abs, &self.g_abs);
        self.work = DenseMatrix::from_fn(lk.rows(), lk.cols(), |i, j| {
            (lk[(i, j)] + (f_abs[i] + g_abs[j]) / eps).exp()
        });
        if self.work.first_non_finite().is_some() {
            return Err(GcaError::Overflow {
                iteration: self.iteration(),
            });
        }
        Ok(true)
    }

    pub(crate) fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let eps = self.kernel.epsilon();
        let f = self
            .f_abs
            .iter()
            .zip(&self.u)
            .map(|(a, u)| a + eps * u.ln())
            .collect();
        let g = self
            .g_abs
            .iter()
            .zip(&self.v)
            .map(|(a, v)| a + eps * v.ln())
            .collect();
        (f, g)
    }

    /// Full scalings `exp(f / eps)`, `exp(g / eps)`.
    pub(crate) fn total_scalings(&self) -> (Vec<f64>, Vec<f64>) {
        let eps = self.kernel.epsilon();
        let u = self
            .f_abs
            .iter()
            .zip(&self.u)
            .map(|(a, u)| (a / eps).exp() * u)
            .collect();
        let v = self
            .g_abs
            .iter()
            .zip(&self.v)
            .map(|(a, v)| (a / eps).exp() * v)
            .collect();
        (u, v)
    }

    pub(crate) fn plan(&self) -> DenseMatrix {
        self.work.scale_rows_cols(&self.u, &self.v)
    }

    pub(crate) fn state(&self) -> ScalingState {
        let (f, g) = self.potentials();
        let (u, v) = self.total_scalings();
        ScalingState {
            u,
            v,
            f,
            g,
            epsilon: self.kernel.epsilon(),
            iterations: self.iteration(),
        }
    }

    fn residuals(&self, marginals: &Marginals) -> (f64, f64) {
        let kv = self.work.matvec(&self.v);
        let ktu = self.work.matvec_t(&self.u);
        let row: f64 = self
            .u
            .iter()
            .zip(&kv)
            .zip(marginals.mu())
            .map(|((u, k), m)| (u * k - m).abs())
            .sum();
        let col: f64 = self
            .v
            .iter()
            .zip(&ktu)
            .zip(marginals.nu())
            .map(|((v, k), n)| (v * k - n).abs())
            .sum();
        (row, col)
    }

    fn record(&self, kind: HalfStepKind, marginals: &Marginals) -> HalfStep {
        let (f, g) = self.potentials();
        let (row_residual, col_residual) = self.residuals(marginals);
        HalfStep {
            index: self.half_steps,
            kind,
            f,
            g,
            row_residual,
            col_residual,
        }
    }
}

/// Runs `half_steps` alternating projections (row first) without recording.
pub(crate) fn scale_half_steps<'a>(
    kernel: &'a GibbsKernel,
    marginals: &Marginals,
    half_steps: usize,
    opts: &SolverOptions,
) -> Result<ScalingEngine<'a>> {
    let mut engine = ScalingEngine::new(kernel, opts.absorption_threshold, opts.floor);
    for k in 0..half_steps {
        if k % 2 == 0 {
            engine.row_update(marginals.mu(), 1.0, 0.0)?;
        } else {
            engine.col_update(marginals.nu(), 1.0, 0.0)?;
            if k + 1 < half_steps {
                engine.maybe_absorb()?;
            }
        }
    }
    Ok(engine)
}

pub fn sinkhorn(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    opts: &SolverOptions,
) -> Result<SinkhornOutput> {
    opts.validate()?;
    check_kernel(kernel)?;
    let (r, c) = kernel.shape();
    marginals.check_shape(r, c)?;

    let mut engine = ScalingEngine::new(kernel, opts.absorption_threshold, opts.floor);
    let mut trajectory = Vec::with_capacity(2 * opts.max_iterations.min(10_000));
    let mut converged = false;
    for _ in 0..opts.max_iterations {
        engine.row_update(marginals.mu(), 1.0, 0.0)?;
        trajectory.push(engine.record(HalfStepKind::Row, marginals));
        engine.col_update(marginals.nu(), 1.0, 0.0)?;
        let step = engine.record(HalfStepKind::Col, marginals);
        let done = step.row_residual <= opts.tolerance && step.col_residual <= opts.tolerance;
        trajectory.push(step);
        if done {
            converged = true;
            if opts.mode == StopRule::ToTolerance {
                break;
            }
        } else {
            converged = false;
        }
        engine.maybe_absorb()?;
    }

    let plan = engine.plan();
    let (row_residual, col_residual) = marginal_error(&plan, marginals)?;
    Ok(SinkhornOutput {
        plan: TransportPlan {
            plan,
            epsilon: kernel.epsilon(),
            converged,
            row_residual,
            col_residual,
        },
        state: engine.state(),
        trajectory,
    })
}

fn check_projectable(p: &DenseMatrix) -> Result<()> {
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let x = p[(i, j)];
            if !(x >= 0.0 && x.is_finite()) {
                return Err(GcaError::NonPositive {
                    row: i,
                    col: j,
                    value: x,
                });
            }
        }
    }
    Ok(())
}

/// KL projection onto `{P : P 1 = mu}`: `diag(mu / (P 1)) P`.
pub fn project_rows(p: &DenseMatrix, mu: &[f64]) -> Result<DenseMatrix> {
    if mu.len() != p.rows() {
        return Err(GcaError::DimensionMismatch(format!(
            "mu has length {}, plan has {} rows",
            mu.len(),
            p.rows()
        )));
    }
    check_projectable(p)?;
    let sums = p.row_sums();
    if let Some(index) = sums.iter().position(|&s| s <= 0.0) {
        return Err(GcaError::ZeroSum { axis: "row", index });
    }
    let scale: Vec<f64> = mu.iter().zip(&sums).map(|(m, s)| m / s).collect();
    Ok(p.scale_rows_cols(&scale, &vec![1.0; p.cols()]))
}

/// KL projection onto `{P : P^T 1 = nu}`: `P diag(nu / (P^T 1))`.
pub fn project_cols(p: &DenseMatrix, nu: &[f64]) -> Result<DenseMatrix> {
    if nu.len() != p.cols() {
        return Err(GcaError::DimensionMismatch(format!(
            "nu has length {}, plan has {} columns",
            nu.len(),
            p.cols()
        )));
    }
    check_projectable(p)?;
    let sums = p.col_sums();
    if let Some(index) = sums.iter().position(|&s| s <= 0.0) {
        return Err(GcaError::ZeroSum {
            axis: "column",
            index,
        });
    }
    let scale: Vec<f64> = nu.iter().zip(&sums).map(|(n, s)| n / s).collect();
    Ok(p.scale_rows_cols(&vec![1.0; p.rows()], &scale))
}

/// Hilbert projective metric `log max_ij (a_i b_j) / (a_j b_i)`.
pub fn hilbert_metric(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GcaError::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if !(x > 0.0 && y > 0.0) {
            return Err(GcaError::NonPositive {
                row: i,
                col: 0,
                value: if x > 0.0 { y } else { x },
            });
        }
        let r = x.ln() - y.ln();
        hi = hi.max(r);
        lo = lo.min(r);
    }
    Ok(hi - lo)
}

/// `(||P 1 - mu||_1, ||P^T 1 - nu||_1)`.
pub fn marginal_error(plan: &DenseMatrix, marginals: &Marginals) -> Result<(f64, f64)> {
    marginals.check_shape(plan.rows(), plan.cols())?;
    let row = plan
        .row_sums()
        .iter()
        .zip(marginals.mu())
        .map(|(s, m)| (s - m).abs())
        .sum();
    let col = plan
        .col_sums()
        .iter()
        .zip(marginals.nu())
        .map(|(s, n)| (s - n).abs())
        .sum();
    Ok((row, col))
}

/// Entropic dual `<f, mu> + <g, nu> - eps * sum_ij exp((f_i + g_j - C_ij) / eps) + eps`.
///
/// The exponential term is summed with unit weights, so the scaling
/// iteration is exact block-coordinate ascent on this function and its
/// gradient in `f` is `mu - P 1`.
pub fn dual_objective(
    f: &[f64],
    g: &[f64],
    cost: &DenseMatrix,
    epsilon: f64,
    marginals: &Marginals,
) -> Result<f64> {
    if f.len() != cost.rows() || g.len() != cost.cols() {
        return Err(GcaError::DimensionMismatch(format!(
            "potentials of length ({}, {}) for a {:?} cost",
            f.len(),
            g.len(),
            cost.shape()
        )));
    }
    marginals.check_shape(cost.rows(), cost.cols())?;
    let linear: f64 = f.iter().zip(marginals.mu()).map(|(a, b)| a * b).sum::<f64>()
        + g.iter().zip(marginals.nu()).map(|(a, b)| a * b).sum::<f64>();
    let mut mass = 0.0;
    for i in 0..cost.rows() {
        for j in 0..cost.cols() {
            mass += ((f[i] + g[j] - cost[(i, j)]) / epsilon).exp();
        }
    }
    Ok(linear - epsilon * mass + epsilon)
}
