use ndarray::Array2;
use proptest::prelude::*;
use ssr_core::ot::{build_cost, CostMode};
use ssr_core::routing::{
    brute_force_best_support, kl_to_plan_row, renormalize_topk, softmax_route, ssr_route, topk_indices, Branch,
    BranchOverride, GatingScores, Mode, RouterConfig,
};
use ssr_core::seeded_rng;

fn scores_strategy(max_m: usize, max_n: usize) -> impl Strategy<Value = GatingScores> {
    (1..=max_m, 2..=max_n).prop_flat_map(|(m, n)| {
        prop::collection::vec(-4.0..4.0f64, m * n)
            .prop_map(move |v| GatingScores::new(Array2::from_shape_vec((m, n), v).unwrap()).unwrap())
    })
}

/// A positive row normalized to sum to one, with its length and a valid k.
fn plan_row() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..=8).prop_flat_map(|n| {
        (prop::collection::vec(1e-3..1.0f64, n), 1..=n.min(3)).prop_map(|(mut row, k)| {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            (row, k)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn renormalization_is_kl_optimal((row, k) in plan_row()) {
        let route = renormalize_topk(&row, k).unwrap();
        let best = brute_force_best_support(&row, k).unwrap();
        let kl = kl_to_plan_row(&route, &row).unwrap();
        prop_assert!((kl - best.kl).abs() <= 1e-12, "{kl} vs {}", best.kl);
        // Supports may differ only by swapping entries of equal plan mass.
        let mass = |s: &[usize]| { let mut m: Vec<f64> = s.iter().map(|&j| row[j]).collect(); m.sort_by(f64::total_cmp); m };
        prop_assert_eq!(mass(&route.support), mass(&best.route.support));

        let selected: f64 = route.support.iter().map(|&j| row[j]).sum();
        prop_assert!((kl + selected.ln()).abs() <= 1e-10);
    }

    #[test]
    fn softmax_preserves_topk(scores in scores_strategy(6, 8), k in 1usize..=3) {
        let n = scores.expert_count();
        prop_assume!(k <= n);
        let cost = build_cost(&scores, CostMode::Softmax).unwrap();
        for (raw, soft) in scores.values().rows().into_iter().zip(cost.values().rows()) {
            let raw = raw.to_vec();
            let soft = soft.to_vec();
            // Softmax can merge scores that differ by less than its resolution;
            // only compare rows where the raw top-k boundary is clear.
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(k == n || sorted[k - 1] - sorted[k] > 1e-9);
            prop_assert_eq!(topk_indices(&raw, k).unwrap(), topk_indices(&soft, k).unwrap());
        }
    }

    #[test]
    fn every_router_emits_valid_weights(
        scores in scores_strategy(12, 6),
        k in 1usize..=3,
        p in 0.0..=1.0f64,
        cost_linear in any::<bool>(),
        alpha_noise in prop::sample::select(vec![0.0, 0.5]),
        seed in any::<u64>(),
    ) {
        let n = scores.expert_count();
        prop_assume!(k <= n);
        let config = RouterConfig {
            k,
            p,
            cost_mode: if cost_linear { CostMode::Linear } else { CostMode::Softmax },
            alpha_noise,
            ..RouterConfig::default()
        };
        let decision = ssr_route(&scores, &config, &mut seeded_rng(seed)).unwrap();
        decision.validate(k, n, 1e-12).unwrap();
        softmax_route(&scores, k).unwrap().validate(k, n, 1e-12).unwrap();
    }

    #[test]
    fn inference_is_deterministic(scores in scores_strategy(8, 6), p in 0.0..=1.0f64, a in any::<u64>(), b in any::<u64>()) {
        let config = RouterConfig { mode: Mode::Inference, p, ..RouterConfig::default() };
        let first = ssr_route(&scores, &config, &mut seeded_rng(a)).unwrap();
        let second = ssr_route(&scores, &config, &mut seeded_rng(b)).unwrap();
        prop_assert_eq!(first.branch, Branch::Softmax);
        prop_assert_eq!(first, second);
    }
}

#[test]
fn branch_frequency_tracks_p() {
    const CALLS: usize = 10_000;
    let scores = GatingScores::new(Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1)).unwrap();
    for (seed, p) in [0.001, 0.01, 0.1, 0.5].into_iter().enumerate() {
        let config = RouterConfig {
            p,
            ..RouterConfig::default()
        };
        let mut rng = seeded_rng(seed as u64 + 100);
        let hits = (0..CALLS)
            .filter(|_| ssr_route(&scores, &config, &mut rng).unwrap().branch == Branch::Sinkhorn)
            .count();
        let freq = hits as f64 / CALLS as f64;
        let se = (p * (1.0 - p) / CALLS as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "p={p}: {freq}");
    }
}

#[test]
fn softmax_branch_ignores_cost_noise() {
    let scores = GatingScores::new(Array2::from_shape_fn((16, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64)).unwrap();
    let clean = softmax_route(&scores, 2).unwrap();
    let config = RouterConfig {
        alpha_noise: 1.0,
        branch_override: Some(BranchOverride::ForceSoftmax),
        ..RouterConfig::default()
    };
    assert_eq!(ssr_route(&scores, &config, &mut seeded_rng(1)).unwrap(), clean);
}
