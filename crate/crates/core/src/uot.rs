//! Unbalanced entropic optimal transport.
//!
//! The hard marginal constraints are replaced by generalized-KL penalties
//! weighted by `lambda1`, `lambda2`. Each scaling update becomes the balanced
//! ratio raised to `lambda / (lambda + eps)`; in stabilized variables the
//! absorbed potential contributes the factor `exp(-f / (eps + lambda))`.

use crate::error::{GcaError, Result};
use crate::kernel::GibbsKernel;
use crate::matrix::DenseMatrix;
use crate::solver::{check_kernel, marginal_error, Marginals, ScalingEngine, ScalingState, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UotOptions {
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iterations: usize,
    pub absorption_threshold: f64,
    pub floor: f64,
    /// Rescale every column of the final plan to unit sum.
    pub column_normalize: bool,
}

impl Default for UotOptions {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            max_iterations: 5,
            absorption_threshold: 1e3,
            floor: 1e-30,
            column_normalize: true,
        }
    }
}

impl UotOptions {
    pub fn new(lambda1: f64, lambda2: f64, max_iterations: usize) -> Self {
        Self {
            lambda1,
            lambda2,
            max_iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0) {
                return Err(GcaError::InvalidParameter(format!(
                    "{name} must be nonnegative, got {l}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(GcaError::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
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

    /// `(lambda1 / (lambda1 + eps), lambda2 / (lambda2 + eps))`.
    pub fn exponents(&self, epsilon: f64) -> (f64, f64) {
        (damped_exponent(self.lambda1, epsilon), damped_exponent(self.lambda2, epsilon))
    }
}

pub fn damped_exponent(lambda: f64, epsilon: f64) -> f64 {
    if lambda.is_infinite() {
        1.0
    } else {
        lambda / (lambda + epsilon)
    }
}

/// Everything the losses need from one unbalanced solve.
#[derive(Debug, Clone)]
pub(crate) struct UotRun {
    pub plan: TransportPlan,
    /// Consistent with `plan` (column normalization folded into `g`).
    pub state: ScalingState,
    /// Column potential before the last column update, i.e. `eps log v^(T-1)`.
    pub g_before_last: Vec<f64>,
}

pub(crate) fn run_unbalanced(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    opts: &UotOptions,
) -> Result<UotRun> {
    opts.validate()?;
    check_kernel(kernel)?;
    let (r, c) = kernel.shape();
    marginals.check_shape(r, c)?;
    let eps = kernel.epsilon();
    let (fi1, fi2) = opts.exponents(eps);

    let mut engine = ScalingEngine::new(kernel, opts.absorption_threshold, opts.floor);
    let mut g_before_last = vec![0.0; c];
    let mut f_before_last = vec![0.0; r];
    for t in 0..opts.max_iterations {
        let last = t + 1 == opts.max_iterations;
        if last {
            f_before_last = engine.potentials().0;
        }
        engine.row_update(marginals.mu(), fi1, opts.lambda1)?;
        if last {
            g_before_last = engine.potentials().1;
        }
        engine.col_update(marginals.nu(), fi2, opts.lambda2)?;
        if !last {
            engine.maybe_absorb()?;
        }
    }
    // change of the row potential over the final iteration
    let last_change = f_before_last
        .iter()
        .zip(&engine.potentials().0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // exp(log u + log v - C / eps), formed from the stabilized kernel
    let mut plan = engine.plan();
    let mut state = engine.state();
    if opts.column_normalize {
        let sums = plan.col_sums();
        if let Some(index) = sums.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(GcaError::ZeroSum {
                axis: "column",
                index,
            });
        }
        let inv: Vec<f64> = sums.iter().map(|s| 1.0 / s).collect();
        for row in plan.as_mut_slice().chunks_exact_mut(c.max(1)) {
            row.iter_mut().zip(&inv).for_each(|(x, s)| *x *= s);
        }
        for ((g, v), s) in state.g.iter_mut().zip(state.v.iter_mut()).zip(&sums) {
            *g -= eps * s.ln();
            *v /= s;
        }
    }
    if plan.first_non_finite().is_some() {
        return Err(GcaError::Overflow {
            iteration: opts.max_iterations,
        });
    }
    let (row_residual, col_residual) = marginal_error(&plan, marginals)?;
    Ok(UotRun {
        plan: TransportPlan {
            plan,
            epsilon: eps,
            converged: last_change <= 1e-9,
            row_residual,
            col_residual,
        },
        state,
        g_before_last,
    })
}

pub fn unbalanced_sinkhorn(
    kernel: &GibbsKernel,
    marginals: &Marginals,
    opts: &UotOptions,
) -> Result<(TransportPlan, ScalingState)> {
    let run = run_unbalanced(kernel, marginals, opts)?;
    Ok((run.plan, run.state))
}

/// Generalized KL `sum a log(a / b) - a + b`, with `0 log 0 = 0`.
pub fn generalized_kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = if x > 0.0 { x * (x / y).ln() } else { 0.0 };
            t - x + y
        })
        .sum()
}

/// Terms of the unbalanced objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UotObjective {
    pub transport: f64,
    pub row_penalty: f64,
    pub col_penalty: f64,
    pub entropy: f64,
}

impl UotObjective {
    pub fn total(&self) -> f64 {
        self.transport + self.row_penalty + self.col_penalty + self.entropy
    }
}

/// `<P, C> + l1 KL(P 1 | mu) + l2 KL(P^T 1 | nu) + eps sum P (log P - 1)`.
pub fn uot_objective_terms(
    plan: &DenseMatrix,
    cost: &DenseMatrix,
    epsilon: f64,
    marginals: &Marginals,
    lambda1: f64,
    lambda2: f64,
) -> Result<UotObjective> {
    if plan.shape() != cost.shape() {
        return Err(GcaError::DimensionMismatch(format!(
            "plan {:?} vs cost {:?}",
            plan.shape(),
            cost.shape()
        )));
    }
    marginals.check_shape(plan.rows(), plan.cols())?;
    let mut transport = 0.0;
    let mut entropy = 0.0;
    for (i, row) in plan.row_iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if !(p > 0.0) {
                return Err(GcaError::NonPositive {
                    row: i,
                    col: j,
                    value: p,
                });
            }
            transport += p * cost[(i, j)];
            entropy += p * (p.ln() - 1.0);
        }
    }
    Ok(UotObjective {
        transport,
        row_penalty: lambda1 * generalized_kl(&plan.row_sums(), marginals.mu()),
        col_penalty: lambda2 * generalized_kl(&plan.col_sums(), marginals.nu()),
        entropy: epsilon * entropy,
    })
}

pub fn uot_objective(
    plan: &DenseMatrix,
    cost: &DenseMatrix,
    epsilon: f64,
    marginals: &Marginals,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    uot_objective_terms(plan, cost, epsilon, marginals, lambda1, lambda2).map(|t| t.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{cosine_cost, gibbs_kernel};
    use crate::sampling::{random_pair_batch, rng};
    use crate::solver::{sinkhorn, SolverOptions};
    use rand::Rng;

    fn kernel_at(seed: u64, b: usize, eps: f64) -> GibbsKernel {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, 8, 0.6);
        gibbs_kernel(&cosine_cost(&z1, &z2).unwrap(), eps).unwrap()
    }

    fn balanced(kernel: &GibbsKernel) -> DenseMatrix {
        let m = Marginals::uniform(kernel.size());
        sinkhorn(kernel, &m, &SolverOptions::to_tolerance(1e-13, 100_000))
            .unwrap()
            .plan
            .plan
    }

    #[test]
    fn exponents() {
        let o = UotOptions::new(0.5, 0.0, 1);
        assert_eq!(o.exponents(0.5), (0.5, 0.0));
        assert_eq!(damped_exponent(f64::INFINITY, 0.5), 1.0);
    }

    #[test]
    fn large_lambda_matches_balanced() {
        for seed in 0..10 {
            let kernel = kernel_at(seed, 24, 0.5);
            let m = Marginals::uniform(24);
            let (plan, _) =
                unbalanced_sinkhorn(&kernel, &m, &UotOptions::new(1e4, 1e4, 2000)).unwrap();
            assert!(plan.plan.l1_distance(&balanced(&kernel)) < 1e-3);
        }
    }

    #[test]
    fn zero_lambda_is_column_normalized_kernel() {
        let kernel = kernel_at(1, 16, 0.5);
        let m = Marginals::uniform(16);
        let (plan, state) = unbalanced_sinkhorn(&kernel, &m, &UotOptions::new(0.0, 0.0, 5)).unwrap();
        let expected = crate::solver::project_cols(kernel.values(), m.nu()).unwrap();
        assert!(plan.plan.max_abs_diff(&expected) < 1e-12);
        assert!(state.u.iter().all(|&u| (u - 1.0).abs() < 1e-15));
    }

    #[test]
    fn intermediate_lambda_residual_in_between() {
        for seed in 0..10 {
            let eps = 0.5;
            let kernel = kernel_at(seed + 100, 20, eps);
            let m = Marginals::uniform(20);
            let residual = |l: f64| {
                let mut o = UotOptions::new(l, l, 500);
                o.column_normalize = false;
                let (p, _) = unbalanced_sinkhorn(&kernel, &m, &o).unwrap();
                p.row_residual + p.col_residual
            };
            let (lo, mid, hi) = (residual(0.0), residual(eps), residual(1e4));
            assert!(hi < mid && mid < lo, "{hi} {mid} {lo}");
        }
    }

    #[test]
    fn stays_finite_and_positive_at_small_epsilon() {
        for seed in 0..5 {
            let kernel = kernel_at(seed, 32, 0.01);
            let m = Marginals::uniform(32);
            let (plan, state) =
                unbalanced_sinkhorn(&kernel, &m, &UotOptions::new(1.0, 1.0, 100)).unwrap();
            assert!(plan.plan.as_slice().iter().all(|&p| p > 0.0 && p.is_finite()));
            assert!(state.f.iter().chain(&state.g).all(|x| x.is_finite()));
            assert!(state.u.iter().chain(&state.v).all(|x| x.is_finite()));
        }
    }

    #[test]
    fn state_reproduces_plan() {
        let kernel = kernel_at(7, 12, 0.5);
        let m = Marginals::uniform(12);
        let (plan, state) = unbalanced_sinkhorn(&kernel, &m, &UotOptions::new(2.0, 3.0, 9)).unwrap();
        assert!(state.plan(&kernel).max_abs_diff(&plan.plan) < 1e-12);
        for s in plan.plan.col_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_penalties_vanish_when_feasible() {
        let kernel = kernel_at(3, 10, 0.5);
        let p = balanced(&kernel);
        let m = Marginals::uniform(10);
        let t = uot_objective_terms(&p, &kernel.cost(), 0.5, &m, 3.0, 3.0).unwrap();
        assert!(t.row_penalty.abs() < 1e-12 && t.col_penalty.abs() < 1e-12);
    }

    #[test]
    fn solver_output_is_local_minimum() {
        let mut r = rng(55);
        for seed in 0..5 {
            let kernel = kernel_at(seed + 40, 10, 0.5);
            let cost = kernel.cost();
            let m = Marginals::uniform(10);
            let mut o = UotOptions::new(2.0, 2.0, 3000);
            o.column_normalize = false;
            let (plan, _) = unbalanced_sinkhorn(&kernel, &m, &o).unwrap();
            let at = uot_objective(&plan.plan, &cost, 0.5, &m, 2.0, 2.0).unwrap();
            for _ in 0..20 {
                // multiplicative noise, rescaled to keep the total mass
                let noise: Vec<f64> = (0..100).map(|_| 0.01 * (r.gen::<f64>() - 0.5)).collect();
                let mut q = plan.plan.clone();
                for (x, n) in q.as_mut_slice().iter_mut().zip(&noise) {
                    *x *= 1.0 + n;
                }
                q = q.scale(plan.plan.sum() / q.sum());
                let there = uot_objective(&q, &cost, 0.5, &m, 2.0, 2.0).unwrap();
                assert!(at <= there + 1e-12, "{at} > {there}");
            }
        }
    }

    #[test]
    fn doubling_lambda1_tightens_row_marginal() {
        for seed in 0..5 {
            let kernel = kernel_at(seed + 60, 12, 0.5);
            let m = Marginals::uniform(12);
            let row_kl = |l: f64| {
                let mut o = UotOptions::new(l, 1.0, 2000);
                o.column_normalize = false;
                let (p, _) = unbalanced_sinkhorn(&kernel, &m, &o).unwrap();
                generalized_kl(&p.plan.row_sums(), m.mu())
            };
            for l in [0.25, 0.5, 1.0, 2.0, 4.0] {
                assert!(row_kl(2.0 * l) <= row_kl(l) + 1e-14);
            }
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        let kernel = kernel_at(0, 4, 0.5);
        let m = Marginals::uniform(4);
        assert!(unbalanced_sinkhorn(&kernel, &m, &UotOptions::new(-1.0, 1.0, 5)).is_err());
    }

    #[test]
    fn generalized_kl_basics() {
        assert_eq!(generalized_kl(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((generalized_kl(&[0.0], &[2.0]) - 2.0).abs() < 1e-15);
        assert!(generalized_kl(&[1.5, 0.5], &[1.0, 1.0]) > 0.0);
    }
}
