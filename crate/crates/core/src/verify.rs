//! Executable property suite over random instances.
//!
//! Every instance draws its own embeddings, temperature and robust-loss
//! parameters from a stream keyed by `(seed, index)`, so results do not depend
//! on scheduling. Instances may run on a thread pool; the report is ordered by
//! instance index.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GcaError, Result};
use crate::kernel::{cosine_cost, gibbs_kernel, GibbsKernel};
use crate::losses::{
    gca_ince_loss, gca_rince_loss, ince_loss, kl_plan_divergence, rince_loss, rince_proximal_form, Horizon,
    RinceParams,
};
use crate::metrics::kl_via_duals;
use crate::plans::identity_plan;
use crate::sampling::{random_instance, rng, PairInstance};
use crate::solver::{dual_objective, sinkhorn, HalfStepKind, Marginals, SolverOptions, TransportPlan};
use crate::uot::{unbalanced_sinkhorn, UotOptions};

/// Scaling iterations recorded for the trajectory properties.
pub const TRAJECTORY_ITERATIONS: usize = 10;
/// Penalty weight standing in for the balanced limit.
pub const BALANCED_LAMBDA: f64 = 1e4;
pub const BALANCED_LIMIT_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    /// Half-step plan loss equals the softmax loss.
    SoftmaxEquivalence,
    /// Robust loss equals its proximal form up to `e^{q / eps}`.
    RobustEquivalence,
    /// `KL(I | P)` never increases across full iterations.
    KlMonotone,
    /// The KL read off the dual potentials equals the direct KL.
    DualIdentity,
    /// Iterated robust loss lies below the single-projection form at `q = 1`.
    RobustOrdering,
    /// The dual objective never decreases and the converged potential sum
    /// dominates the half-step one.
    DualAscent,
    /// Large penalties recover the balanced plan.
    UotBalancedLimit,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::SoftmaxEquivalence,
        Property::RobustEquivalence,
        Property::KlMonotone,
        Property::DualIdentity,
        Property::RobustOrdering,
        Property::DualAscent,
        Property::UotBalancedLimit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::SoftmaxEquivalence => "softmax-equivalence",
            Property::RobustEquivalence => "robust-equivalence",
            Property::KlMonotone => "kl-monotone",
            Property::DualIdentity => "dual-identity",
            Property::RobustOrdering => "robust-ordering",
            Property::DualAscent => "dual-ascent",
            Property::UotBalancedLimit => "uot-balanced-limit",
        }
    }

    /// Largest admissible value of the measured violation.
    pub fn tolerance(self) -> f64 {
        match self {
            Property::SoftmaxEquivalence => 1e-10,
            Property::RobustEquivalence => 1e-9,
            Property::KlMonotone => 1e-12,
            Property::DualIdentity => 1e-9,
            Property::RobustOrdering => 1e-12,
            Property::DualAscent => 1e-12,
            Property::UotBalancedLimit => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub property: Property,
    pub instance: usize,
    /// Size of the violation; `NaN` when the evaluation itself failed.
    pub measure: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertySummary {
    pub property: Property,
    pub tolerance: f64,
    pub passed: usize,
    pub failed: usize,
    pub worst: f64,
    pub failing_instances: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub instances: usize,
    pub tolerance_scale: f64,
    pub all_passed: bool,
    pub properties: Vec<PropertySummary>,
    #[serde(skip)]
    pub outcomes: Vec<CheckOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub instances: usize,
    pub seed: u64,
    /// Multiplies every tolerance; `0` demands exact results.
    pub tolerance_scale: f64,
    /// Worker cap; `None` falls back to `GCA_THREADS`, then to the default pool.
    pub threads: Option<usize>,
    pub properties: Vec<Property>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            tolerance_scale: 1.0,
            threads: None,
            properties: Property::ALL.to_vec(),
        }
    }
}

/// One random instance together with its robust-loss parameters.
#[derive(Debug, Clone)]
pub struct VerifyInstance {
    pub pair: PairInstance,
    pub robust: RinceParams,
}

/// Deterministic instance `index` of the stream keyed by `seed`.
pub fn draw_instance(seed: u64, index: usize) -> VerifyInstance {
    let mut r = rng(seed);
    r.set_stream(index as u64);
    let pair = random_instance(&mut r);
    let q = [0.5, 1.0][r.gen_range(0..2)];
    let lambda = [0.01, 0.5][r.gen_range(0..2)];
    VerifyInstance {
        pair,
        robust: RinceParams { q, lambda },
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Largest increase between consecutive values, relative to the earlier one.
pub fn max_relative_increase(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
}

/// Largest decrease between consecutive values, relative to the earlier one.
pub fn max_relative_decrease(values: &[f64]) -> f64 {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    max_relative_increase(&negated)
}

fn trajectory_kls(kernel: &GibbsKernel) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = kernel.size();
    let out = sinkhorn(kernel, &Marginals::uniform(b), &SolverOptions::fixed(TRAJECTORY_ITERATIONS))?;
    let target = identity_plan(b)?;
    let cost = kernel.cost();
    let mut direct = Vec::new();
    let mut via = Vec::new();
    for step in out.trajectory.iter().filter(|s| s.kind == HalfStepKind::Col) {
        let plan = TransportPlan {
            plan: step.plan(kernel),
            epsilon: kernel.epsilon(),
            converged: false,
            row_residual: step.row_residual,
            col_residual: step.col_residual,
        };
        direct.push(kl_plan_divergence(&target, &plan)?);
        via.push(kl_via_duals(&cost, &step.f, &step.g, kernel.epsilon())?);
    }
    Ok((direct, via))
}

/// Violation measure for one property on one instance.
pub fn measure_property(property: Property, inst: &VerifyInstance) -> Result<f64> {
    let VerifyInstance { pair, robust } = inst;
    let (z1, z2, eps) = (&pair.z1, &pair.z2, pair.epsilon);
    match property {
        Property::SoftmaxEquivalence => {
            let a = ince_loss(z1, z2, eps)?.value;
            let b = gca_ince_loss(z1, z2, eps, Horizon::HalfStep)?.value;
            Ok((a - b).abs())
        }
        Property::RobustEquivalence => {
            let prox = rince_proximal_form(z1, z2, eps, *robust)?;
            let direct = rince_loss(z1, z2, eps, *robust)?.value;
            Ok(relative((robust.q / eps).exp() * prox, direct))
        }
        Property::KlMonotone => {
            let (direct, _) = trajectory_kls(&pair.kernel())?;
            Ok(max_relative_increase(&direct))
        }
        Property::DualIdentity => {
            let (direct, via) = trajectory_kls(&pair.kernel())?;
            Ok(direct
                .iter()
                .zip(&via)
                .map(|(d, v)| (d - v).abs() / d.abs().max(1.0))
                .fold(0.0, f64::max))
        }
        Property::RobustOrdering => {
            let params = RinceParams { q: 1.0, ..*robust };
            let iterated = gca_rince_loss(z1, z2, eps, params, crate::losses::DEFAULT_ITERATIONS)?.value;
            let single = rince_proximal_form(z1, z2, eps, params)?;
            Ok((iterated - single).max(0.0))
        }
        Property::DualAscent => {
            let kernel = pair.kernel();
            let b = kernel.size();
            let marginals = Marginals::uniform(b);
            let cost = kernel.cost();
            let out = sinkhorn(&kernel, &marginals, &SolverOptions::to_tolerance(1e-10, 10_000))?;
            let duals = out
                .trajectory
                .iter()
                .map(|s| dual_objective(&s.f, &s.g, &cost, eps, &marginals))
                .collect::<Result<Vec<f64>>>()?;
            let half = out.trajectory[0].potential_sum();
            let last = out.trajectory.last().expect("at least one step").potential_sum();
            let shortfall = (half - last).max(0.0) / half.abs().max(1.0);
            Ok(max_relative_decrease(&duals).max(shortfall))
        }
        Property::UotBalancedLimit => {
            let kernel = gibbs_kernel(&cosine_cost(z1, z2)?, eps)?;
            let marginals = Marginals::uniform(kernel.size());
            let balanced = sinkhorn(&kernel, &marginals, &SolverOptions::to_tolerance(1e-12, 10_000))?;
            let opts = UotOptions::new(BALANCED_LAMBDA, BALANCED_LAMBDA, BALANCED_LIMIT_ITERATIONS);
            let (plan, _) = unbalanced_sinkhorn(&kernel, &marginals, &opts)?;
            Ok(plan.plan.l1_distance(&balanced.plan.plan))
        }
    }
}

fn run_instance(config: &VerifyConfig, index: usize) -> Vec<CheckOutcome> {
    let inst = draw_instance(config.seed, index);
    config
        .properties
        .iter()
        .map(|&property| {
            let measure = measure_property(property, &inst).unwrap_or(f64::NAN);
            CheckOutcome {
                property,
                instance: index,
                measure,
                passed: measure <= property.tolerance() * config.tolerance_scale,
            }
        })
        .collect()
}

fn thread_cap(config: &VerifyConfig) -> Option<usize> {
    config.threads.or_else(|| {
        std::env::var("GCA_THREADS")
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    })
}

pub fn verify_suite(config: &VerifyConfig) -> Result<VerifyReport> {
    if !(config.tolerance_scale >= 0.0 && config.tolerance_scale.is_finite()) {
        return Err(GcaError::InvalidParameter(format!(
            "tolerance scale must be nonnegative, got {}",
            config.tolerance_scale
        )));
    }
    let run = || -> Vec<CheckOutcome> {
        (0..config.instances)
            .into_par_iter()
            .map(|i| run_instance(config, i))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let outcomes = match thread_cap(config) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| GcaError::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let properties: Vec<PropertySummary> = config
        .properties
        .iter()
        .map(|&property| {
            let mine: Vec<&CheckOutcome> = outcomes.iter().filter(|o| o.property == property).collect();
            let failing_instances: Vec<usize> = mine.iter().filter(|o| !o.passed).map(|o| o.instance).collect();
            let worst = mine
                .iter()
                .map(|o| if o.measure.is_nan() { f64::INFINITY } else { o.measure })
                .fold(0.0, f64::max);
            PropertySummary {
                property,
                tolerance: property.tolerance() * config.tolerance_scale,
                passed: mine.len() - failing_instances.len(),
                failed: failing_instances.len(),
                worst,
                failing_instances,
            }
        })
        .collect();
    Ok(VerifyReport {
        seed: config.seed,
        instances: config.instances,
        tolerance_scale: config.tolerance_scale,
        all_passed: properties.iter().all(|p| p.failed == 0),
        properties,
        outcomes,
    })
}

impl VerifyReport {
    pub fn summary_lines(&self) -> Vec<String> {
        self.properties
            .iter()
            .map(|p| {
                format!(
                    "{} {}: {}/{} passed, worst {:.3e} (tolerance {:.1e})",
                    if p.failed == 0 { "PASS" } else { "FAIL" },
                    p.property.name(),
                    p.passed,
                    p.passed + p.failed,
                    p.worst,
                    p.tolerance
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
