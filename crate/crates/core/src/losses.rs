//! The contrastive loss family and its envelope gradients.
//!
//! Every plan-based loss is evaluated from a small set of frozen dual
//! potentials. The same frozen description drives the analytic gradient and
//! the finite-difference check, so the two can be compared exactly.
//!
//! Gradients are taken with respect to the two embedding matrices as they
//! enter the similarity `S = Z1 Z2^T`; chaining through any normalization
//! layer is the caller's job.

use std::fmt;
use std::str::FromStr;

use crate::error::{GcaError, Result};
use crate::kernel::{EmbeddingBatch, GibbsKernel};
use crate::matrix::{norm, DenseMatrix};
use crate::plans::TargetPlan;
use crate::solver::{
    project_rows, scale_half_steps, Marginals, ScalingState, SolverOptions, TransportPlan,
};
use crate::uot::{run_unbalanced, UotOptions};

pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_UOT_WEIGHT: f64 = 0.5;

/// Robust-loss parameters: exponent `q` in `(0, 1]` and weight `lambda >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RinceParams {
    pub q: f64,
    pub lambda: f64,
}

impl Default for RinceParams {
    fn default() -> Self {
        Self {
            q: 0.98,
            lambda: 0.01,
        }
    }
}

impl RinceParams {
    pub fn new(q: f64, lambda: f64) -> Result<Self> {
        let p = Self { q, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(GcaError::InvalidParameter(format!(
                "q must lie in (0, 1], got {}",
                self.q
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(GcaError::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// How far the scaling iteration runs before the loss is read off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// Only the first row update: the softmax plan.
    HalfStep,
    /// `T` full row+column iterations.
    Iterations(usize),
}

impl Horizon {
    pub fn half_steps(self) -> usize {
        match self {
            Horizon::HalfStep => 1,
            Horizon::Iterations(t) => 2 * t,
        }
    }
}

/// Dual quantities held fixed while differentiating.
#[derive(Debug, Clone)]
pub(crate) enum Frozen {
    /// No inner solve; the loss is differentiated in full.
    Free,
    /// `KL(target | exp((f_i + g_j - C_ij) / eps))`.
    Plan {
        f: Vec<f64>,
        g: Vec<f64>,
        target: DenseMatrix,
    },
    /// Robust term with the column potential frozen and the row scaling
    /// recomputed as `(mu / K v)^exponent`.
    Robust {
        g: Vec<f64>,
        mu: Vec<f64>,
        exponent: f64,
        params: RinceParams,
    },
    Mixed {
        weight: f64,
        robust: Box<Frozen>,
        plan: Box<Frozen>,
    },
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_z1: DenseMatrix,
    pub grad_z2: DenseMatrix,
    /// Plan the loss was read from (softmax plan for the closed-form losses).
    pub plan: DenseMatrix,
    /// Scalings that generated `plan`, when an iterative solve was involved.
    pub scalings: Option<ScalingState>,
    pub(crate) frozen: Frozen,
}

fn check_pair(z1: &DenseMatrix, z2: &DenseMatrix) -> Result<()> {
    if z1.shape() != z2.shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "embedding batches {:?} and {:?} differ",
            z1.shape(),
            z2.shape()
        )));
    }
    if z1.rows() == 0 {
        return Err(GcaError::DimensionMismatch("empty batch".into()));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(GcaError::InvalidParameter(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

fn check_target(target: &TargetPlan, b: usize) -> Result<()> {
    if target.size() != b {
        return Err(GcaError::DimensionMismatch(format!(
            "target plan is {}x{0}, batch has {b} rows",
            target.size()
        )));
    }
    Ok(())
}

/// `(S - 1) / eps`, the log of the cosine Gibbs kernel without clamping so
/// that it stays differentiable.
fn log_kernel(z1: &DenseMatrix, z2: &DenseMatrix, epsilon: f64) -> Result<DenseMatrix> {
    Ok(z1.matmul_t(z2)?.map(|s| (s - 1.0) / epsilon))
}

fn similarity_grads(g: &DenseMatrix, z1: &DenseMatrix, z2: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let g1 = g.matmul(z2).expect("B x B times B x d");
    let g2 = g.t_matmul(z1).expect("B x B times B x d");
    (g1, g2)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Generalized KL term; adds `weight * (P - T) / eps` to the similarity
/// gradient. `plan` must equal `exp(log_kernel + (f + g) / eps)`.
#[allow(clippy::too_many_arguments)]
fn plan_term(
    target: &DenseMatrix,
    log_kernel: &DenseMatrix,
    f: &[f64],
    g: &[f64],
    plan: &DenseMatrix,
    epsilon: f64,
    weight: f64,
    grad: &mut DenseMatrix,
) -> f64 {
    let mut value = 0.0;
    let scale = weight / epsilon;
    for i in 0..plan.rows() {
        let (trow, prow) = (target.row(i), plan.row(i));
        for (j, ((&t, &p), gij)) in trow.iter().zip(prow).zip(grad.row_mut(i)).enumerate() {
            if t > 0.0 {
                let log_p = log_kernel[(i, j)] + (f[i] + g[j]) / epsilon;
                value += t * (t.ln() - log_p);
            }
            value += p - t;
            *gij += scale * (p - t);
        }
    }
    value
}

fn plan_from_log(log_kernel: &DenseMatrix, f: &[f64], g: &[f64], epsilon: f64) -> DenseMatrix {
    DenseMatrix::from_fn(log_kernel.rows(), log_kernel.cols(), |i, j| {
        (log_kernel[(i, j)] + (f[i] + g[j]) / epsilon).exp()
    })
}

/// `sum_i -(1/q) (K_ii v_i)^q + (1/q) (lambda (K v)_i^e / mu_i^e)^q` with
/// `v = exp(g / eps)` frozen; adds `weight` times its similarity gradient.
#[allow(clippy::too_many_arguments)]
fn robust_term(
    log_kernel: &DenseMatrix,
    kernel: Option<&DenseMatrix>,
    g: &[f64],
    mu: &[f64],
    exponent: f64,
    params: RinceParams,
    epsilon: f64,
    weight: f64,
    grad: &mut DenseMatrix,
) -> f64 {
    let (b, c) = log_kernel.shape();
    let q = params.q;
    let log_v: Vec<f64> = g.iter().map(|x| x / epsilon).collect();
    let shift = log_v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled_v: Vec<f64> = log_v.iter().map(|x| (x - shift).exp()).collect();
    let log_lambda = params.lambda.ln();

    let mut value = 0.0;
    let mut weights = vec![0.0; c];
    for i in 0..b {
        let row = log_kernel.row(i);
        // K_ij v_j / (K v)_i, computed without exponentials when the kernel
        // entries are available and the row sum is comfortably normal
        let mut log_r = f64::NAN;
        if let Some(k) = kernel {
            let mut sum = 0.0;
            for ((w, &kij), &vj) in weights.iter_mut().zip(k.row(i)).zip(&scaled_v) {
                *w = kij * vj;
                sum += *w;
            }
            if sum > 1e-250 {
                weights.iter_mut().for_each(|w| *w /= sum);
                log_r = sum.ln() + shift;
            }
        }
        if log_r.is_nan() {
            let terms = row.iter().zip(&log_v).map(|(l, v)| l + v);
            log_r = log_sum_exp(terms.clone());
            for (w, t) in weights.iter_mut().zip(terms) {
                *w = (t - log_r).exp();
            }
        }

        let diag = (q * (row[i] + log_v[i])).exp();
        let robust = if params.lambda > 0.0 {
            (q * (log_lambda + exponent * (log_r - mu[i].ln()))).exp()
        } else {
            0.0
        };
        value += (robust - diag) / q;
        let scale = weight * exponent * robust / epsilon;
        let grow = grad.row_mut(i);
        for (gij, w) in grow.iter_mut().zip(&weights) {
            *gij += scale * w;
        }
        grow[i] -= weight * diag / epsilon;
    }
    debug_assert_eq!(b, grad.rows());
    value
}

/// Value of a frozen description at a given log kernel; adds `weight` times
/// its similarity gradient to `grad`.
fn accumulate_frozen(
    frozen: &Frozen,
    log_kernel: &DenseMatrix,
    kernel: Option<&DenseMatrix>,
    plan: Option<&DenseMatrix>,
    epsilon: f64,
    weight: f64,
    grad: &mut DenseMatrix,
) -> f64 {
    match frozen {
        Frozen::Free => unreachable!("free losses are differentiated directly"),
        Frozen::Plan { f, g, target } => {
            let owned;
            let plan = match plan {
                Some(p) => p,
                None => {
                    owned = plan_from_log(log_kernel, f, g, epsilon);
                    &owned
                }
            };
            plan_term(target, log_kernel, f, g, plan, epsilon, weight, grad)
        }
        Frozen::Robust {
            g,
            mu,
            exponent,
            params,
        } => robust_term(log_kernel, kernel, g, mu, *exponent, *params, epsilon, weight, grad),
        Frozen::Mixed {
            weight: w,
            robust,
            plan: kl,
        } => {
            let rv = accumulate_frozen(robust, log_kernel, kernel, None, epsilon, weight * w, grad);
            let kv = accumulate_frozen(kl, log_kernel, kernel, plan, epsilon, weight * (1.0 - w), grad);
            w * rv + (1.0 - w) * kv
        }
    }
}

/// Value and similarity gradient for a frozen description at a given log
/// kernel. Returns `None` for losses without frozen quantities.
fn frozen_terms(
    frozen: &Frozen,
    log_kernel: &DenseMatrix,
    kernel: Option<&DenseMatrix>,
    plan: Option<&DenseMatrix>,
    epsilon: f64,
) -> Option<(f64, DenseMatrix)> {
    if let Frozen::Free = frozen {
        return None;
    }
    let mut grad = DenseMatrix::zeros(log_kernel.rows(), log_kernel.cols());
    let value = accumulate_frozen(frozen, log_kernel, kernel, plan, epsilon, 1.0, &mut grad);
    Some((value, grad))
}

fn finish(
    value: f64,
    sim_grad: &DenseMatrix,
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    plan: DenseMatrix,
    scalings: Option<ScalingState>,
    frozen: Frozen,
) -> LossResult {
    let (grad_z1, grad_z2) = similarity_grads(sim_grad, z1, z2);
    LossResult {
        value,
        grad_z1,
        grad_z2,
        plan,
        scalings,
        frozen,
    }
}

fn softmax_rows(s: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let lse: Vec<f64> = s.row_iter().map(|r| log_sum_exp(r.iter().copied())).collect();
    let p = DenseMatrix::from_fn(s.rows(), s.cols(), |i, j| (s[(i, j)] - lse[i]).exp());
    (lse, p)
}

fn ince_raw(z1: &DenseMatrix, z2: &DenseMatrix, epsilon: f64) -> Result<LossResult> {
    check_pair(z1, z2)?;
    check_epsilon(epsilon)?;
    let s = z1.matmul_t(z2)?.scale(1.0 / epsilon);
    let (lse, p) = softmax_rows(&s);
    let value = (0..s.rows()).map(|i| lse[i] - s[(i, i)]).sum();
    let mut g = p.scale(1.0 / epsilon);
    for i in 0..s.rows() {
        g[(i, i)] -= 1.0 / epsilon;
    }
    Ok(finish(value, &g, z1, z2, p, None, Frozen::Free))
}

/// Softmax contrastive loss `sum_i -log(e^{s_ii} / sum_j e^{s_ij})`, `s = <z1, z2> / eps`.
pub fn ince_loss(z1: &EmbeddingBatch, z2: &EmbeddingBatch, epsilon: f64) -> Result<LossResult> {
    ince_raw(z1.matrix(), z2.matrix(), epsilon)
}

/// Generalized KL between a target and a solver plan.
pub fn kl_plan_divergence(target: &TargetPlan, plan: &TransportPlan) -> Result<f64> {
    let t = target.matrix();
    let p = &plan.plan;
    if t.shape() != p.shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "target {:?} vs plan {:?}",
            t.shape(),
            p.shape()
        )));
    }
    let mut value = 0.0;
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            let (a, b) = (t[(i, j)], p[(i, j)]);
            if a > 0.0 {
                if !(b > 0.0) {
                    return Err(GcaError::SupportViolation { row: i, col: j });
                }
                value += a * (a / b).ln();
            }
            value += b - a;
        }
    }
    Ok(value)
}

fn gca_ince_raw(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    epsilon: f64,
    horizon: Horizon,
    target: Option<&TargetPlan>,
) -> Result<LossResult> {
    check_pair(z1, z2)?;
    check_epsilon(epsilon)?;
    let b = z1.rows();
    let target = match target {
        Some(t) => {
            check_target(t, b)?;
            t.matrix().clone()
        }
        None => DenseMatrix::identity(b),
    };
    let log_k = log_kernel(z1, z2, epsilon)?;
    let kernel = GibbsKernel::from_log_values(log_k, epsilon);
    let half_steps = horizon.half_steps();
    if half_steps == 0 {
        return Err(GcaError::InvalidParameter("at least one iteration is required".into()));
    }
    let engine = scale_half_steps(&kernel, &Marginals::uniform(b), half_steps, &SolverOptions::default())?;
    let (f, g) = engine.potentials();
    let plan = engine.plan();
    let state = engine.state();
    let frozen = Frozen::Plan { f, g, target };
    let (value, grad) = frozen_terms(&frozen, kernel.log_values(), None, Some(&plan), epsilon)
        .expect("plan term is frozen");
    Ok(finish(value, &grad, z1, z2, plan, Some(state), frozen))
}

/// `KL(I | P)` with `P` the scaling plan after `horizon`.
pub fn gca_ince_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    horizon: Horizon,
) -> Result<LossResult> {
    gca_ince_raw(z1.matrix(), z2.matrix(), epsilon, horizon, None)
}

/// As [`gca_ince_loss`] against an arbitrary target plan.
pub fn gca_ince_loss_with_target(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    horizon: Horizon,
    target: &TargetPlan,
) -> Result<LossResult> {
    gca_ince_raw(z1.matrix(), z2.matrix(), epsilon, horizon, Some(target))
}

fn rince_raw(z1: &DenseMatrix, z2: &DenseMatrix, epsilon: f64, params: RinceParams) -> Result<LossResult> {
    check_pair(z1, z2)?;
    check_epsilon(epsilon)?;
    params.validate()?;
    let q = params.q;
    let s = z1.matmul_t(z2)?.scale(1.0 / epsilon);
    let (lse, p) = softmax_rows(&s);
    let mut value = 0.0;
    let mut g = DenseMatrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let positive = (q * s[(i, i)]).exp();
        let robust = if params.lambda > 0.0 {
            (q * (params.lambda.ln() + lse[i])).exp()
        } else {
            0.0
        };
        value += (robust - positive) / q;
        for j in 0..s.cols() {
            g[(i, j)] = robust * p[(i, j)] / epsilon;
        }
        g[(i, i)] -= positive / epsilon;
    }
    Ok(finish(value, &g, z1, z2, p, None, Frozen::Free))
}

/// Robust contrastive loss, per row
/// `(1/q) (-e^{q s_ii} + lambda^q (sum_j e^{s_ij})^q)`.
pub fn rince_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    params: RinceParams,
) -> Result<LossResult> {
    rince_raw(z1.matrix(), z2.matrix(), epsilon, params)
}

/// The robust loss read off the first row projection of the kernel:
/// `-(1/q) sum (P_ii / u_i)^q + (1/q) sum (lambda / u_i)^q`.
/// Differs from [`rince_loss`] by the factor `e^{-q / eps}`.
pub fn rince_proximal_form(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    params: RinceParams,
) -> Result<f64> {
    check_pair(z1.matrix(), z2.matrix())?;
    check_epsilon(epsilon)?;
    params.validate()?;
    let kernel = log_kernel(z1.matrix(), z2.matrix(), epsilon)?.map(f64::exp);
    let mu = vec![1.0; kernel.rows()];
    let plan = project_rows(&kernel, &mu)?;
    let q = params.q;
    let value = kernel
        .row_sums()
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let u = mu[i] / r;
            (-(plan[(i, i)] / u).powf(q) + (params.lambda / u).powf(q)) / q
        })
        .sum();
    Ok(value)
}

fn gca_rince_raw(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    epsilon: f64,
    params: RinceParams,
    iterations: usize,
) -> Result<LossResult> {
    check_pair(z1, z2)?;
    check_epsilon(epsilon)?;
    params.validate()?;
    if iterations == 0 {
        return Err(GcaError::InvalidParameter("at least one iteration is required".into()));
    }
    let b = z1.rows();
    let kernel = GibbsKernel::from_log_values(log_kernel(z1, z2, epsilon)?, epsilon);
    let marginals = Marginals::uniform(b);
    // state (u^(T), v^(T-1)): the row update of the last iteration
    let engine = scale_half_steps(&kernel, &marginals, 2 * iterations - 1, &SolverOptions::default())?;
    let (_, g) = engine.potentials();
    let plan = engine.plan();
    let state = engine.state();
    let frozen = Frozen::Robust {
        g,
        mu: marginals.mu().to_vec(),
        exponent: 1.0,
        params,
    };
    let (value, grad) = frozen_terms(&frozen, kernel.log_values(), Some(kernel.values()), None, epsilon)
        .expect("robust term is frozen");
    Ok(finish(value, &grad, z1, z2, plan, Some(state), frozen))
}

/// Robust loss at the `T`-th row update, `-(1/q)(diag(P)/u)^q + (1/q)(lambda/u)^q`.
pub fn gca_rince_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    params: RinceParams,
    iterations: usize,
) -> Result<LossResult> {
    gca_rince_raw(z1.matrix(), z2.matrix(), epsilon, params, iterations)
}

/// Settings of the unbalanced composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UotLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rince: RinceParams,
    /// Share of the robust term; the rest goes to the KL term.
    pub weight: f64,
    pub iterations: usize,
}

impl Default for UotLossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            rince: RinceParams::default(),
            weight: DEFAULT_UOT_WEIGHT,
            iterations: DEFAULT_ITERATIONS,
        }
    }
}

fn gca_uot_raw(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    epsilon: f64,
    config: &UotLossConfig,
    target: Option<&TargetPlan>,
) -> Result<LossResult> {
    check_pair(z1, z2)?;
    check_epsilon(epsilon)?;
    config.rince.validate()?;
    if !(0.0..=1.0).contains(&config.weight) {
        return Err(GcaError::InvalidParameter(format!(
            "weight must lie in [0, 1], got {}",
            config.weight
        )));
    }
    let b = z1.rows();
    let target = match target {
        Some(t) => {
            check_target(t, b)?;
            t.matrix().clone()
        }
        None => DenseMatrix::identity(b),
    };
    let kernel = GibbsKernel::from_log_values(log_kernel(z1, z2, epsilon)?, epsilon);
    let marginals = Marginals::uniform(b);
    let opts = UotOptions::new(config.lambda1, config.lambda2, config.iterations);
    let run = run_unbalanced(&kernel, &marginals, &opts)?;
    let (exponent, _) = opts.exponents(epsilon);
    let frozen = Frozen::Mixed {
        weight: config.weight,
        robust: Box::new(Frozen::Robust {
            g: run.g_before_last,
            mu: marginals.mu().to_vec(),
            exponent,
            params: config.rince,
        }),
        plan: Box::new(Frozen::Plan {
            f: run.state.f.clone(),
            g: run.state.g.clone(),
            target,
        }),
    };
    let (value, grad) = frozen_terms(
        &frozen,
        kernel.log_values(),
        Some(kernel.values()),
        Some(&run.plan.plan),
        epsilon,
    )
    .expect("composite term is frozen");
    Ok(finish(value, &grad, z1, z2, run.plan.plan, Some(run.state), frozen))
}

/// `w * robust(u^(T), v^(T-1)) + (1 - w) * KL(target | P)` with the unbalanced
/// plan `P` (column-normalized) and an identity target.
pub fn gca_uot_loss(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    epsilon: f64,
    config: &UotLossConfig,
) -> Result<LossResult> {
    gca_uot_raw(z1.matrix(), z2.matrix(), epsilon, config, None)
}

fn byol_raw(q: &DenseMatrix, z2: &DenseMatrix) -> Result<LossResult> {
    check_pair(q, z2)?;
    let diff = DenseMatrix::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] - z2[(i, j)]);
    let value = diff.row_iter().map(|r| norm(r).powi(2)).sum();
    let kernel = q.matmul_t(z2)?;
    let plan = DenseMatrix::from_fn(q.rows(), z2.rows(), |i, j| {
        let sq = norm(q.row(i)).powi(2) + norm(z2.row(j)).powi(2) - 2.0 * kernel[(i, j)];
        (-sq.max(0.0).sqrt()).exp()
    });
    Ok(LossResult {
        value,
        grad_z1: diff.scale(2.0),
        grad_z2: DenseMatrix::zeros(z2.rows(), z2.cols()),
        plan,
        scalings: None,
        frozen: Frozen::Free,
    })
}

/// `sum_i |q_i - z2_i|^2`; the target branch receives no gradient. The plan
/// snapshot is the kernel `exp(-|q_i - z2_j|)`.
pub fn byol_loss(q: &EmbeddingBatch, z2: &EmbeddingBatch) -> Result<LossResult> {
    byol_raw(q.matrix(), z2.matrix())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ince,
    GcaInce,
    Rince,
    GcaRince,
    GcaUot,
    Byol,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Ince,
        LossKind::GcaInce,
        LossKind::Rince,
        LossKind::GcaRince,
        LossKind::GcaUot,
        LossKind::Byol,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ince => "ince",
            LossKind::GcaInce => "gca-ince",
            LossKind::Rince => "rince",
            LossKind::GcaRince => "gca-rince",
            LossKind::GcaUot => "gca-uot",
            LossKind::Byol => "byol",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = GcaError;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GcaError::InvalidParameter(format!("unknown loss '{s}'")))
    }
}

/// Hyperparameters for any loss in the family.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub rince: RinceParams,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight: f64,
    /// Replaces the identity target for the plan-based losses.
    pub target: Option<TargetPlan>,
}

impl Default for LossConfig {
    fn default() -> Self {
        let uot = UotLossConfig::default();
        Self {
            epsilon: crate::kernel::DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
            rince: RinceParams::default(),
            lambda1: uot.lambda1,
            lambda2: uot.lambda2,
            weight: uot.weight,
            target: None,
        }
    }
}

impl LossConfig {
    pub fn uot(&self) -> UotLossConfig {
        UotLossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            rince: self.rince,
            weight: self.weight,
            iterations: self.iterations,
        }
    }
}

fn evaluate_raw(
    kind: LossKind,
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    config: &LossConfig,
) -> Result<LossResult> {
    let eps = config.epsilon;
    let target = config.target.as_ref();
    match kind {
        LossKind::Ince => ince_raw(z1, z2, eps),
        LossKind::GcaInce => gca_ince_raw(z1, z2, eps, Horizon::Iterations(config.iterations), target),
        LossKind::Rince => rince_raw(z1, z2, eps, config.rince),
        LossKind::GcaRince => gca_rince_raw(z1, z2, eps, config.rince, config.iterations),
        LossKind::GcaUot => gca_uot_raw(z1, z2, eps, &config.uot(), target),
        LossKind::Byol => byol_raw(z1, z2),
    }
}

/// Evaluates `kind` on a pair of unit-norm batches.
pub fn evaluate_loss(
    kind: LossKind,
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    config: &LossConfig,
) -> Result<LossResult> {
    evaluate_raw(kind, z1.matrix(), z2.matrix(), config)
}

/// Loss value at perturbed embeddings with the inner scalings of `at` held fixed.
fn frozen_value(
    kind: LossKind,
    at: &LossResult,
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    config: &LossConfig,
) -> Result<f64> {
    if let Frozen::Free = at.frozen {
        return Ok(evaluate_raw(kind, z1, z2, config)?.value);
    }
    let log_k = log_kernel(z1, z2, config.epsilon)?;
    let kernel = log_k.map(f64::exp);
    let (value, _) = frozen_terms(&at.frozen, &log_k, Some(&kernel), None, config.epsilon)
        .expect("non-free description");
    Ok(value)
}

/// Largest normwise relative error between the analytic embedding gradient
/// and central finite differences of the loss with its scalings frozen.
/// The target branch of `byol` carries no gradient and is not probed.
pub fn loss_grad_check(
    kind: LossKind,
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    config: &LossConfig,
) -> Result<f64> {
    const STEP: f64 = 1e-6;
    let at = evaluate_loss(kind, z1, z2, config)?;
    let mut worst: f64 = 0.0;
    let sides: &[usize] = if kind == LossKind::Byol { &[0] } else { &[0, 1] };
    for &side in sides {
        let analytic = if side == 0 { &at.grad_z1 } else { &at.grad_z2 };
        let mut numeric = DenseMatrix::zeros(analytic.rows(), analytic.cols());
        let mut a = z1.matrix().clone();
        let mut b = z2.matrix().clone();
        for k in 0..numeric.as_slice().len() {
            let probe = |a: &mut DenseMatrix, b: &mut DenseMatrix, delta: f64| -> Result<f64> {
                let m = if side == 0 { &mut *a } else { &mut *b };
                let orig = m.as_slice()[k];
                m.as_mut_slice()[k] = orig + delta;
                let v = frozen_value(kind, &at, a, b, config);
                let m = if side == 0 { a } else { b };
                m.as_mut_slice()[k] = orig;
                v
            };
            let plus = probe(&mut a, &mut b, STEP)?;
            let minus = probe(&mut a, &mut b, -STEP)?;
            numeric.as_mut_slice()[k] = (plus - minus) / (2.0 * STEP);
        }
        let scale = analytic
            .as_slice()
            .iter()
            .chain(numeric.as_slice())
            .fold(0.0f64, |m, x| m.max(x.abs()));
        if scale > 0.0 {
            worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::normalize_rows;
    use crate::plans::identity_plan;
    use crate::sampling::{random_pair_batch, rng};

    fn orthonormal_pairs() -> (EmbeddingBatch, EmbeddingBatch) {
        let z = normalize_rows(&DenseMatrix::identity(2)).unwrap();
        (z.clone(), z)
    }

    fn pair(seed: u64, b: usize, d: usize) -> (EmbeddingBatch, EmbeddingBatch) {
        random_pair_batch(&mut rng(seed), b, d, 0.5)
    }

    #[test]
    fn ince_reference_value() {
        let (z1, z2) = orthonormal_pairs();
        let r = ince_loss(&z1, &z2, 1.0).unwrap();
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((r.value - (-2.0 * p.ln())).abs() < 1e-12);
        assert!((r.value - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn ince_vanishes_at_low_temperature() {
        let z = normalize_rows(&DenseMatrix::identity(4)).unwrap();
        assert!(ince_loss(&z, &z, 0.01).unwrap().value < 1e-3);
    }

    #[test]
    fn rince_reference_value() {
        let (z1, z2) = orthonormal_pairs();
        let r = rince_loss(&z1, &z2, 1.0, RinceParams::new(1.0, 0.5).unwrap()).unwrap();
        assert!((r.value + 1.718282).abs() < 1e-6);
        let e = 1f64.exp();
        assert!((r.value - 2.0 * (-e + 0.5 * (e + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn half_step_gca_ince_is_ince() {
        for seed in 0..20 {
            let (z1, z2) = pair(seed, 12, 6);
            for eps in [0.1, 0.5, 1.0] {
                let a = ince_loss(&z1, &z2, eps).unwrap();
                let b = gca_ince_loss(&z1, &z2, eps, Horizon::HalfStep).unwrap();
                assert!((a.value - b.value).abs() < 1e-12 * a.value.abs().max(1.0));
                assert!(a.grad_z1.max_abs_diff(&b.grad_z1) < 1e-10);
                assert!(a.grad_z2.max_abs_diff(&b.grad_z2) < 1e-10);
            }
        }
    }

    #[test]
    fn dual_identity_at_every_iterate() {
        for seed in 0..10 {
            let (z1, z2) = pair(seed + 50, 10, 5);
            let eps = 0.5;
            let cost = DenseMatrix::from_fn(10, 10, |i, j| {
                1.0 - crate::matrix::dot(z1.row(i), z2.row(j))
            });
            for t in 1..6 {
                let r = gca_ince_loss(&z1, &z2, eps, Horizon::Iterations(t)).unwrap();
                let s = r.scalings.as_ref().unwrap();
                let via_duals = (cost.diag().iter().sum::<f64>() - s.potential_sum()) / eps;
                assert!((r.value - via_duals).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kl_divergence_examples() {
        let t = identity_plan(3).unwrap();
        let same = TransportPlan {
            plan: DenseMatrix::identity(3),
            epsilon: 1.0,
            converged: true,
            row_residual: 0.0,
            col_residual: 0.0,
        };
        assert_eq!(kl_plan_divergence(&t, &same).unwrap(), 0.0);

        let p = DenseMatrix::from_rows(&[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]]).unwrap();
        let plan = TransportPlan { plan: p.clone(), ..same.clone() };
        let expected: f64 = (0..3).map(|i| -p[(i, i)].ln()).sum();
        assert!((kl_plan_divergence(&t, &plan).unwrap() - expected).abs() < 1e-12);

        let mut holes = p;
        holes[(1, 1)] = 0.0;
        let bad = TransportPlan { plan: holes, ..same };
        assert!(matches!(
            kl_plan_divergence(&t, &bad),
            Err(GcaError::SupportViolation { row: 1, col: 1 })
        ));
    }

    #[test]
    fn kl_divergence_nonnegative_at_matched_mass() {
        use rand::Rng;
        let mut r = rng(3);
        for _ in 0..100 {
            let n = r.gen_range(2..8);
            let a = DenseMatrix::from_fn(n, n, |_, _| r.gen_range(0.01..1.0));
            let b = DenseMatrix::from_fn(n, n, |_, _| r.gen_range(0.01..1.0));
            let t = crate::plans::normalize_plan(&a, n as f64).unwrap();
            let p = TransportPlan {
                plan: b.scale(n as f64 / b.sum()),
                epsilon: 1.0,
                converged: true,
                row_residual: 0.0,
                col_residual: 0.0,
            };
            assert!(kl_plan_divergence(&t, &p).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn more_iterations_lower_gca_ince() {
        for seed in 0..20 {
            let (z1, z2) = pair(seed + 10, 16, 8);
            let half = gca_ince_loss(&z1, &z2, 0.5, Horizon::HalfStep).unwrap();
            let five = gca_ince_loss(&z1, &z2, 0.5, Horizon::Iterations(5)).unwrap();
            assert!(five.value <= half.value + 1e-12);
        }
    }

    #[test]
    fn proximal_form_matches_rince_up_to_constant() {
        for seed in 0..10 {
            let (z1, z2) = pair(seed + 20, 9, 7);
            for (q, lambda) in [(0.5, 0.01), (1.0, 0.5), (0.98, 0.01)] {
                for eps in [0.1, 0.5, 1.0] {
                    let params = RinceParams::new(q, lambda).unwrap();
                    let prox = rince_proximal_form(&z1, &z2, eps, params).unwrap();
                    let direct = rince_loss(&z1, &z2, eps, params).unwrap().value;
                    let scaled = (q / eps).exp() * prox;
                    assert!((scaled - direct).abs() <= 1e-10 * direct.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn proximal_form_without_lambda_and_sign() {
        let (z1, z2) = pair(5, 6, 4);
        let p = RinceParams::new(0.7, 0.0).unwrap();
        let prox = rince_proximal_form(&z1, &z2, 0.5, p).unwrap();
        let k = log_kernel(z1.matrix(), z2.matrix(), 0.5).unwrap().map(f64::exp);
        let expected: f64 = (0..6).map(|i| -(k[(i, i)]).powf(0.7) / 0.7).sum();
        assert!((prox - expected).abs() < 1e-12);

        let z = normalize_rows(&DenseMatrix::identity(4)).unwrap();
        let v = rince_proximal_form(&z, &z, 0.5, RinceParams::new(1.0, 0.01).unwrap()).unwrap();
        assert!(v.is_finite() && v < 0.0);
    }

    #[test]
    fn gca_rince_first_iteration_is_proximal_form() {
        for seed in 0..10 {
            let (z1, z2) = pair(seed + 30, 8, 5);
            let params = RinceParams::default();
            let a = gca_rince_loss(&z1, &z2, 0.5, params, 1).unwrap().value;
            let b = rince_proximal_form(&z1, &z2, 0.5, params).unwrap();
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rince_q_continuity() {
        for seed in 0..10 {
            let (z1, z2) = pair(seed + 40, 8, 5);
            let a = rince_loss(&z1, &z2, 1.0, RinceParams::new(0.999, 0.01).unwrap()).unwrap();
            let b = rince_loss(&z1, &z2, 1.0, RinceParams::new(1.0, 0.01).unwrap()).unwrap();
            assert!((a.value - b.value).abs() <= 1e-2);
        }
    }

    #[test]
    fn rince_and_ince_share_the_minimizer_along_a_rotation() {
        // positives z2_i = cos t e_i + sin t e_{B+i}; negatives stay orthogonal
        let b = 6;
        let z1 = normalize_rows(&DenseMatrix::from_fn(b, 2 * b, |i, j| (i == j) as u8 as f64)).unwrap();
        let family = |t: f64| {
            let raw = DenseMatrix::from_fn(b, 2 * b, |i, j| {
                if j == i {
                    t.cos()
                } else if j == b + i {
                    t.sin()
                } else {
                    0.0
                }
            });
            normalize_rows(&raw).unwrap()
        };
        let grid: Vec<f64> = (-40..=40).map(|k| k as f64 * 0.02).collect();
        let params = RinceParams::new(1.0, 1.0 / b as f64).unwrap();
        let argmin = |f: &dyn Fn(f64) -> f64| {
            grid.iter()
                .copied()
                .min_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap())
                .unwrap()
        };
        let ince_t = argmin(&|t| ince_loss(&z1, &family(t), 0.5).unwrap().value);
        let rince_t = argmin(&|t| rince_loss(&z1, &family(t), 0.5, params).unwrap().value);
        assert_eq!(ince_t, rince_t);
        assert_eq!(ince_t, 0.0);
    }

    #[test]
    fn uot_limits_of_the_composite() {
        for seed in 0..5 {
            let (z1, z2) = pair(seed + 90, 10, 6);
            let kl_only = UotLossConfig {
                lambda1: 1e4,
                lambda2: 1e4,
                weight: 0.0,
                ..UotLossConfig::default()
            };
            let a = gca_uot_loss(&z1, &z2, 0.5, &kl_only).unwrap().value;
            let b = gca_ince_loss(&z1, &z2, 0.5, Horizon::Iterations(5)).unwrap().value;
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");

            let robust_only = UotLossConfig {
                weight: 1.0,
                iterations: 1,
                ..kl_only
            };
            let a = gca_uot_loss(&z1, &z2, 0.5, &robust_only).unwrap().value;
            let b = rince_proximal_form(&z1, &z2, 0.5, RinceParams::default()).unwrap();
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn default_uot_is_finite() {
        let (z1, z2) = pair(9, 32, 16);
        let r = gca_uot_loss(&z1, &z2, 0.5, &UotLossConfig::default()).unwrap();
        assert!(r.value.is_finite());
        assert!(r.grad_z1.first_non_finite().is_none());
        assert!(r.grad_z2.first_non_finite().is_none());
    }

    #[test]
    fn byol_examples() {
        let (z1, z2) = pair(4, 5, 3);
        let same = byol_loss(&z2, &z2).unwrap();
        assert_eq!(same.value, 0.0);
        let (a, _) = orthonormal_pairs();
        let swapped = normalize_rows(&DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert!((byol_loss(&a, &swapped).unwrap().value - 4.0).abs() < 1e-12);
        let r = byol_loss(&z1, &z2).unwrap();
        assert!(r.grad_z2.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_checks() {
        let config = LossConfig::default();
        for kind in LossKind::ALL {
            for seed in 0..3 {
                let (z1, z2) = pair(seed + 200, 7, 4);
                let err = loss_grad_check(kind, &z1, &z2, &config).unwrap();
                let tol = if kind == LossKind::GcaUot { 1e-4 } else { 1e-5 };
                assert!(err <= tol, "{kind}: {err}");
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let (z1, z2) = pair(11, 8, 5);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let p1 = z1.permute_rows(&perm);
        let p2 = z2.permute_rows(&perm);
        let config = LossConfig::default();
        for kind in LossKind::ALL {
            let a = evaluate_loss(kind, &z1, &z2, &config).unwrap().value;
            let b = evaluate_loss(kind, &p1, &p2, &config).unwrap().value;
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{kind}");
        }
        let target = crate::plans::block_domain_plan(&[0, 0, 1, 1, 0, 1, 0, 1], 0.4, 0.1).unwrap();
        let a = gca_ince_loss_with_target(&z1, &z2, 0.5, Horizon::Iterations(5), &target).unwrap();
        let b = gca_ince_loss_with_target(&p1, &p2, 0.5, Horizon::Iterations(5), &target.permute(&perm))
            .unwrap();
        assert!((a.value - b.value).abs() < 1e-10 * a.value.abs().max(1.0));
    }

    #[test]
    fn plan_snapshot_matches_scalings() {
        let (z1, z2) = pair(12, 10, 6);
        let config = LossConfig::default();
        for kind in [LossKind::GcaInce, LossKind::GcaRince, LossKind::GcaUot] {
            let r = evaluate_loss(kind, &z1, &z2, &config).unwrap();
            let s = r.scalings.as_ref().unwrap();
            let k = GibbsKernel::from_log_values(log_kernel(z1.matrix(), z2.matrix(), 0.5).unwrap(), 0.5);
            assert!(s.plan(&k).max_abs_diff(&r.plan) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn loss_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("nce".parse::<LossKind>().is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (z1, _) = pair(1, 4, 3);
        let (_, z2) = pair(2, 5, 3);
        assert!(matches!(
            ince_loss(&z1, &z2, 0.5),
            Err(GcaError::DimensionMismatch(_))
        ));
    }
}
