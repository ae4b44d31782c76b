//! Acceptance suite: every criterion runs at its pinned tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion fails.

use std::time::Instant;

use gca::kernel::{cosine_cost, gibbs_kernel, GibbsKernel, DEFAULT_EPSILON};
use gca::losses::{gca_ince_loss, gca_uot_loss, loss_grad_check, Horizon, LossConfig, LossKind, UotLossConfig};
use gca::sampling::{random_pair_batch, rng, EPSILON_GRID};
use gca::solver::{hilbert_metric, sinkhorn, HalfStepKind, Marginals, SolverOptions};
use gca::train::{
    domain_alignment_experiment, encoder_grad_check, gen_blobs, probe_encoder, train_encoder, AugmentConfig,
    BlobConfig, MlpEncoder, TrainConfig,
};
use gca::uot::{unbalanced_sinkhorn, UotOptions};
use gca::verify::{draw_instance, measure_property, Property};
use rand::Rng;

const SEED: u64 = 0;

struct Verdict {
    criterion: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(criterion: usize, title: &'static str, passed: bool, detail: String) -> Verdict {
    let v = Verdict {
        criterion,
        title,
        passed,
        detail,
    };
    println!(
        "criterion {:>2} {} [{}]: {}",
        v.criterion,
        if v.passed { "PASS" } else { "FAIL" },
        v.title,
        v.detail
    );
    v
}

/// Worst measure of `property` over the first `n` instances and how many
/// exceeded `tolerance`.
fn sweep(property: Property, n: usize, tolerance: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..n {
        let m = measure_property(property, &draw_instance(SEED, i)).unwrap_or(f64::INFINITY);
        worst = worst.max(m);
        if !(m <= tolerance) {
            failures += 1;
        }
    }
    (worst, failures)
}

fn property_criterion(
    criterion: usize,
    title: &'static str,
    property: Property,
    n: usize,
    tolerance: f64,
) -> Verdict {
    let (worst, failures) = sweep(property, n, tolerance);
    verdict(
        criterion,
        title,
        failures == 0,
        format!("{failures}/{n} violations, worst {worst:.3e}, tolerance {tolerance:.0e}"),
    )
}

fn criterion_3() -> Verdict {
    let n = 100;
    let (kl_worst, kl_fail) = sweep(Property::KlMonotone, n, 1e-12);
    let (id_worst, id_fail) = sweep(Property::DualIdentity, n, 1e-9);
    verdict(
        3,
        "KL(I|P) non-increasing, direct and via duals",
        kl_fail == 0 && id_fail == 0,
        format!(
            "monotonicity {kl_fail}/{n} violations (worst relative rise {kl_worst:.2e}); \
             dual identity {id_fail}/{n} violations (worst {id_worst:.2e}, tolerance 1e-9)"
        ),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    }
}

/// Hilbert distance between `exp(f / eps)` and `exp(f_ref / eps)`, computed
/// on shifted exponents so neither vector overflows.
fn scaling_distance(f: &[f64], f_ref: &[f64], eps: f64) -> f64 {
    let diff: Vec<f64> = f.iter().zip(f_ref).map(|(a, b)| (a - b) / eps).collect();
    let top = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a: Vec<f64> = diff.iter().map(|d| (d - top).exp()).collect();
    hilbert_metric(&a, &vec![1.0; a.len()]).expect("positive scalings")
}

fn criterion_6() -> Verdict {
    let n = 30;
    let mut worst_residual: f64 = 0.0;
    let mut worst_r2: f64 = 1.0;
    let mut min_points = usize::MAX;
    let mut failures = 0;
    for i in 0..n {
        let inst = draw_instance(SEED + 6, i);
        let kernel = inst.pair.kernel();
        let marginals = Marginals::uniform(kernel.size());
        let out = sinkhorn(&kernel, &marginals, &SolverOptions::to_tolerance(1e-10, 100_000)).unwrap();
        let residual = out.plan.row_residual.max(out.plan.col_residual);
        // iterate well past the stopping point for the limiting scaling
        let reference =
            sinkhorn(&kernel, &marginals, &SolverOptions::fixed(3 * out.state.iterations + 50)).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = out
            .trajectory
            .iter()
            .filter(|s| s.kind == HalfStepKind::Col)
            .enumerate()
            .map(|(t, s)| ((t + 1) as f64, scaling_distance(&s.f, &reference.state.f, inst.pair.epsilon)))
            .filter(|&(_, d)| d >= 1e-8)
            .map(|(t, d)| (t, d.ln()))
            .unzip();
        let r2 = if xs.len() >= 3 { r_squared(&xs, &ys) } else { 1.0 };
        worst_residual = worst_residual.max(residual);
        worst_r2 = worst_r2.min(r2);
        min_points = min_points.min(xs.len());
        if !(residual <= 1e-10 && r2 >= 0.99) {
            failures += 1;
        }
    }
    verdict(
        6,
        "solver feasibility and geometric rate",
        failures == 0,
        format!(
            "{failures}/{n} failures; worst L1 residual {worst_residual:.2e} (<= 1e-10); \
             worst R^2 {worst_r2:.4} (>= 0.99); fewest fitted points {min_points}"
        ),
    )
}

fn criterion_7() -> Verdict {
    let n = 20;
    let eps = DEFAULT_EPSILON;
    let lambdas = [1.0, 10.0, 100.0, 1e4];
    let iterations = 2000;
    let mut r = rng(SEED + 7);
    let mut worst_limit: f64 = 0.0;
    let mut worst_relaxed: f64 = 0.0;
    let mut non_monotone = 0;
    for _ in 0..n {
        let b = r.gen_range(4..=64);
        let d = r.gen_range(4..=32);
        let noise = r.gen_range(0.0..1.0);
        let (z1, z2) = random_pair_batch(&mut r, b, d, noise);
        let kernel = gibbs_kernel(&cosine_cost(&z1, &z2).unwrap(), eps).unwrap();
        let marginals = Marginals::uniform(b);
        let balanced = sinkhorn(&kernel, &marginals, &SolverOptions::to_tolerance(1e-12, 100_000)).unwrap();
        let gaps: Vec<f64> = lambdas
            .iter()
            .map(|&l| {
                let (plan, _) = unbalanced_sinkhorn(&kernel, &marginals, &UotOptions::new(l, l, iterations)).unwrap();
                plan.plan.l1_distance(&balanced.plan.plan)
            })
            .collect();
        worst_limit = worst_limit.max(gaps[gaps.len() - 1]);
        if gaps.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
        let (relaxed, _) = unbalanced_sinkhorn(&kernel, &marginals, &UotOptions::new(0.0, 0.0, 5)).unwrap();
        worst_relaxed = worst_relaxed.max(relaxed.plan.max_abs_diff(&column_normalized(&kernel)));
    }
    verdict(
        7,
        "unbalanced limits",
        worst_limit <= 1e-3 && worst_relaxed <= 1e-12 && non_monotone == 0,
        format!(
            "lambda=1e4 worst L1 gap {worst_limit:.2e} (<= 1e-3); lambda=0 worst deviation \
             {worst_relaxed:.2e} (<= 1e-12); gap not monotone on {non_monotone}/{n}"
        ),
    )
}

fn column_normalized(kernel: &GibbsKernel) -> gca::matrix::DenseMatrix {
    let k = kernel.values();
    let sums = k.col_sums();
    gca::matrix::DenseMatrix::from_fn(k.rows(), k.cols(), |i, j| k[(i, j)] / sums[j])
}

fn criterion_8() -> Verdict {
    let n = 20;
    let mut r = rng(SEED + 8);
    let checks = [
        (LossKind::Ince, 1e-5),
        (LossKind::GcaInce, 1e-5),
        (LossKind::GcaRince, 1e-5),
        (LossKind::Byol, 1e-5),
        (LossKind::GcaUot, 1e-4),
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for (kind, tolerance) in checks {
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let b = r.gen_range(4..=16);
            let d = r.gen_range(4..=12);
            let noise = r.gen_range(0.0..1.0);
            let epsilon = EPSILON_GRID[r.gen_range(0..EPSILON_GRID.len())];
            let (z1, z2) = random_pair_batch(&mut r, b, d, noise);
            let config = LossConfig {
                epsilon,
                ..LossConfig::default()
            };
            worst = worst.max(loss_grad_check(kind, &z1, &z2, &config).unwrap_or(f64::INFINITY));
        }
        passed &= worst <= tolerance;
        parts.push(format!("{kind} {worst:.1e}/{tolerance:.0e}"));
    }
    let mut encoder_worst: f64 = 0.0;
    for seed in 0..5 {
        let mut er = rng(100 + seed);
        let mut encoder = MlpEncoder::new(&[6, 9, 7], &[5], &mut er).unwrap();
        // nonzero biases so bias gradients are exercised away from zero
        let shifted: Vec<f64> = encoder.parameters().iter().map(|p| p + 0.3 * er.gen::<f64>()).collect();
        encoder.set_parameters(&shifted).unwrap();
        let x = gca::sampling::gaussian_matrix(&mut er, 8, 6);
        encoder_worst = encoder_worst.max(encoder_grad_check(&encoder, &x, seed).unwrap());
    }
    passed &= encoder_worst <= 1e-5;
    parts.push(format!("encoder {encoder_worst:.1e}/1e-5"));
    verdict(8, "gradient correctness", passed, parts.join(", "))
}

fn criterion_9() -> Verdict {
    let data = gen_blobs(&BlobConfig::default()).unwrap();
    let mut parts = Vec::new();
    let mut passed = true;
    for kind in [LossKind::GcaInce, LossKind::GcaRince, LossKind::GcaUot] {
        let config = TrainConfig {
            loss: kind,
            ..TrainConfig::default()
        };
        let (encoder, history) = train_encoder(&data, &config, &AugmentConfig::default()).unwrap();
        let (accuracy, _) = probe_encoder(&encoder, &data, config.seed).unwrap();
        let (first, last) = (history[0], history[history.len() - 1]);
        let ok = accuracy >= 0.95 && last.alignment < first.alignment && last.uniformity < first.uniformity;
        passed &= ok;
        parts.push(format!(
            "{kind}: probe {accuracy:.3}, alignment {:.4}->{:.4}, uniformity {:.4}->{:.4}",
            first.alignment, last.alignment, first.uniformity, last.uniformity
        ));
    }
    verdict(9, "desk-scale training", passed, parts.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn criterion_10() -> Verdict {
    let alphas = [0.0, 0.25, 0.5, 1.0];
    let seeds = 5;
    let mut class = vec![Vec::new(); alphas.len()];
    let mut domain = vec![Vec::new(); alphas.len()];
    for seed in 0..seeds {
        let data = gen_blobs(&BlobConfig {
            domains: 2,
            seed,
            ..BlobConfig::default()
        })
        .unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let rows = domain_alignment_experiment(&alphas, 0.0, &data, &config, &AugmentConfig::default()).unwrap();
        for (k, row) in rows.iter().enumerate() {
            class[k].push(row.class_accuracy);
            domain[k].push(row.domain_accuracy);
        }
    }
    let class_med: Vec<f64> = class.into_iter().map(median).collect();
    let domain_med: Vec<f64> = domain.into_iter().map(median).collect();
    let monotone = domain_med.windows(2).all(|w| w[1] >= w[0]);
    let rho = spearman(&alphas, &domain_med);
    let drop = class_med[0] - class_med[alphas.len() - 1];
    verdict(
        10,
        "domain target sweep",
        monotone && rho > 0.0 && drop <= 0.02,
        format!(
            "median domain accuracy {domain_med:?} (non-decreasing: {monotone}, spearman {rho:.3}); \
             median class accuracy {class_med:?} (drop {drop:.3} <= 0.02)"
        ),
    )
}

fn criterion_11() -> Verdict {
    let runs = 50;
    let eps = DEFAULT_EPSILON;
    let mut r = rng(SEED + 11);
    let mut plan_times = Vec::with_capacity(runs);
    let mut uot_times = Vec::with_capacity(runs);
    let uot = UotLossConfig::default();
    for _ in 0..runs {
        let (z1, z2) = random_pair_batch(&mut r, 256, 32, 0.5);
        let t = Instant::now();
        let a = gca_ince_loss(&z1, &z2, eps, Horizon::Iterations(5)).unwrap();
        plan_times.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let b = gca_uot_loss(&z1, &z2, eps, &uot).unwrap();
        uot_times.push(t.elapsed().as_secs_f64());
        std::hint::black_box((a.value, b.value));
    }
    let (plan_median, uot_median) = (median(plan_times), median(uot_times));
    verdict(
        11,
        "per-batch time, unbalanced vs balanced",
        uot_median <= plan_median,
        format!(
            "median gca-uot {:.3} ms vs gca-ince {:.3} ms at B=256, T=5",
            uot_median * 1e3,
            plan_median * 1e3
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let start = Instant::now();
    let verdicts = vec![
        property_criterion(1, "half-step plan loss equals softmax loss", Property::SoftmaxEquivalence, 200, 1e-10),
        property_criterion(2, "robust loss equals scaled proximal form", Property::RobustEquivalence, 200, 1e-9),
        criterion_3(),
        property_criterion(4, "iterated robust loss below proximal form at q=1", Property::RobustOrdering, 100, 1e-12),
        property_criterion(5, "dual objective ascent", Property::DualAscent, 100, 1e-12),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
        criterion_10(),
        criterion_11(),
    ];
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.criterion).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1} s",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
