use gca::kernel::{cosine_cost, gibbs_kernel};
use gca::losses::{evaluate_loss, gca_ince_loss, ince_loss, Horizon, LossConfig, LossKind};
use gca::metrics::{alignment_loss, uniformity_loss};
use gca::plans::block_domain_plan;
use gca::sampling::{random_pair_batch, rng, EPSILON_GRID};
use gca::solver::{hilbert_metric, marginal_error, project_rows, sinkhorn, Marginals, SolverOptions};
use gca::uot::{generalized_kl, unbalanced_sinkhorn, UotOptions};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn converged_plans_meet_both_marginals(seed in any::<u64>(), b in 2usize..40, d in 2usize..16, e in 0usize..3) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, d, 0.8);
        let kernel = gibbs_kernel(&cosine_cost(&z1, &z2).unwrap(), EPSILON_GRID[e]).unwrap();
        let m = Marginals::uniform(b);
        let out = sinkhorn(&kernel, &m, &SolverOptions::to_tolerance(1e-10, 100_000)).unwrap();
        let (row, col) = marginal_error(&out.plan.plan, &m).unwrap();
        prop_assert!(row <= 1e-9 && col <= 1e-9, "{row} {col}");
        prop_assert!(out.plan.plan.as_slice().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn first_half_step_is_row_projection(seed in any::<u64>(), b in 2usize..20) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, 5, 0.5);
        let kernel = gibbs_kernel(&cosine_cost(&z1, &z2).unwrap(), 0.5).unwrap();
        let out = sinkhorn(&kernel, &Marginals::uniform(b), &SolverOptions::fixed(1)).unwrap();
        let projected = project_rows(kernel.values(), &vec![1.0; b]).unwrap();
        prop_assert!(out.trajectory[0].plan(&kernel).max_abs_diff(&projected) < 1e-14);
    }

    #[test]
    fn hilbert_metric_is_projective(
        a in prop::collection::vec(0.01f64..10.0, 2..12),
        scale in 0.01f64..100.0,
    ) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        prop_assert!(hilbert_metric(&a, &scaled).unwrap().abs() < 1e-12);
        let d = hilbert_metric(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - hilbert_metric(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn generalized_kl_is_nonnegative(
        pairs in prop::collection::vec((0.0f64..5.0, 0.01f64..5.0), 1..20),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(generalized_kl(&a, &b) >= -1e-12);
        prop_assert!(generalized_kl(&b, &b).abs() < 1e-12);
    }

    #[test]
    fn unbalanced_plans_are_positive_and_finite(
        seed in any::<u64>(), b in 2usize..24, l1 in 0.0f64..50.0, l2 in 0.0f64..50.0,
    ) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, 6, 0.6);
        let kernel = gibbs_kernel(&cosine_cost(&z1, &z2).unwrap(), 0.5).unwrap();
        let (plan, state) = unbalanced_sinkhorn(&kernel, &Marginals::uniform(b), &UotOptions::new(l1, l2, 20)).unwrap();
        prop_assert!(plan.plan.as_slice().iter().all(|&p| p > 0.0 && p.is_finite()));
        prop_assert!(state.plan(&kernel).max_abs_diff(&plan.plan) < 1e-12);
        for s in plan.plan.col_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iterated_plan_loss_never_exceeds_softmax_loss(seed in any::<u64>(), b in 2usize..32, e in 0usize..3) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, 8, 0.7);
        let eps = EPSILON_GRID[e];
        let softmax = ince_loss(&z1, &z2, eps).unwrap().value;
        let iterated = gca_ince_loss(&z1, &z2, eps, Horizon::Iterations(5)).unwrap().value;
        prop_assert!(iterated <= softmax + 1e-10 * softmax.abs().max(1.0), "{iterated} > {softmax}");
    }

    #[test]
    fn losses_commute_with_joint_permutation(seed in any::<u64>(), b in 4usize..16, kind in 0usize..6) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, 6, 0.5);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut r);
        let domains: Vec<i64> = (0..b as i64).map(|i| i % 3).collect();
        let permuted_domains: Vec<i64> = perm.iter().map(|&p| domains[p]).collect();
        let kind = LossKind::ALL[kind];
        let base = LossConfig {
            target: Some(block_domain_plan(&domains, 0.3, 0.1).unwrap()),
            ..LossConfig::default()
        };
        let moved = LossConfig {
            target: Some(block_domain_plan(&permuted_domains, 0.3, 0.1).unwrap()),
            ..LossConfig::default()
        };
        let a = evaluate_loss(kind, &z1, &z2, &base).unwrap().value;
        let p = evaluate_loss(kind, &z1.permute_rows(&perm), &z2.permute_rows(&perm), &moved).unwrap().value;
        prop_assert!((a - p).abs() <= 1e-10 * a.abs().max(1.0), "{kind}: {a} vs {p}");
    }

    #[test]
    fn metric_ranges(seed in any::<u64>(), b in 2usize..30, d in 2usize..10) {
        let mut r = rng(seed);
        let (z1, z2) = random_pair_batch(&mut r, b, d, 1.0);
        let a = alignment_loss(&z1, &z2).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&a));
        let u = uniformity_loss(&z1, 2.0).unwrap();
        prop_assert!((-8.0 - 1e-12..=1e-12).contains(&u));
    }
}
