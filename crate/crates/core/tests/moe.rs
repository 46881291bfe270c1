use ndarray::Array2;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use ssr_core::moe::{
    combine, lb_aux_loss, make_synthetic_task, moe_forward, noisy_gating_baseline, train, z_loss, MoEBlock,
    Regularizer, TaskSpec, TokenBatch, TrainOptions,
};
use ssr_core::routing::{Branch, BranchOverride, GatingScores, RouterConfig, RoutingDecision, TokenRoute};
use ssr_core::{seeded_rng, Error};

fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

fn block(d: usize, n: usize, k: usize, branch: BranchOverride, seed: u64) -> MoEBlock {
    let config = RouterConfig {
        k,
        branch_override: Some(branch),
        ..RouterConfig::default()
    };
    MoEBlock::new(d, n, 2 * d, 1.0, config, &mut seeded_rng(seed)).unwrap()
}

/// Evaluates every expert on every token, then keeps only the routed ones.
fn dense_reference(block: &MoEBlock, x: &Array2<f64>, decision: &RoutingDecision) -> Array2<f64> {
    let n = block.expert_count();
    let mut y = Array2::zeros(x.raw_dim());
    for (i, xi) in x.rows().into_iter().enumerate() {
        let mut mask = vec![0.0; n];
        for (&j, &w) in decision.tokens[i].support.iter().zip(&decision.tokens[i].weights) {
            mask[j] = w;
        }
        for (j, expert) in block.experts.iter().enumerate() {
            y.row_mut(i).scaled_add(mask[j], &expert.forward(xi));
        }
    }
    y
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sparse_forward_matches_dense(
        seed in 0u64..10_000,
        m in 1usize..12,
        n in 2usize..6,
        k in 1usize..3,
        sinkhorn in any::<bool>(),
    ) {
        let branch = if sinkhorn { BranchOverride::ForceSinkhorn } else { BranchOverride::ForceSoftmax };
        let block = block(4, n, k.min(n), branch, seed);
        let batch = TokenBatch::new(random((m, 4), seed + 1), None).unwrap();
        let pass = moe_forward(&block, &batch, &mut seeded_rng(seed)).unwrap();
        prop_assert!(max_abs_diff(&pass.outputs, &dense_reference(&block, &batch.x, &pass.decision)) <= 1e-12);
    }

    #[test]
    fn identical_experts_ignore_routing(seed in 0u64..10_000, sinkhorn in any::<bool>()) {
        let branch = if sinkhorn { BranchOverride::ForceSinkhorn } else { BranchOverride::ForceSoftmax };
        let mut block = block(3, 4, 2, branch, seed);
        let shared = block.experts[0].clone();
        block.experts.iter_mut().for_each(|e| *e = shared.clone());
        let batch = TokenBatch::new(random((5, 3), seed + 1), None).unwrap();
        let pass = moe_forward(&block, &batch, &mut seeded_rng(seed)).unwrap();
        for (y, x) in pass.outputs.rows().into_iter().zip(batch.x.rows()) {
            let f = shared.forward(x);
            prop_assert!(y.iter().zip(&f).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }
}

#[test]
fn single_expert_route_reduces_to_that_expert() {
    let block = block(4, 3, 1, BranchOverride::ForceSoftmax, 7);
    let x = random((6, 4), 8);
    for j in 0..3 {
        let decision = RoutingDecision {
            branch: Branch::Softmax,
            tokens: vec![
                TokenRoute {
                    support: vec![j],
                    weights: vec![1.0]
                };
                6
            ],
            selected_scores: None,
        };
        let y = combine(&block, &x, &decision).unwrap();
        for (yi, xi) in y.rows().into_iter().zip(x.rows()) {
            let f = block.experts[j].forward(xi);
            assert_eq!(yi, f);
        }
    }
}

#[test]
fn lb_loss_matches_two_pass() {
    let scores = GatingScores::new(random((9, 4), 1) * 2.0).unwrap();
    let decision = ssr_core::routing::softmax_route(&scores, 2).unwrap();
    let (m, n) = (9, 4);
    // Pass one: dispatch fractions; pass two: mean gate probabilities.
    let mut f = vec![0.0; n];
    for t in &decision.tokens {
        let top = t.support[if t.weights[0] >= t.weights[1] { 0 } else { 1 }];
        f[top] += 1.0 / m as f64;
    }
    let mut q = vec![0.0; n];
    for row in scores.values().rows() {
        let z: f64 = row.iter().map(|s| s.exp()).sum();
        for (qj, s) in q.iter_mut().zip(row) {
            *qj += s.exp() / z / m as f64;
        }
    }
    let want = n as f64 * f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
    assert!((lb_aux_loss(&decision, &scores) - want).abs() < 1e-12);
}

#[test]
fn z_loss_matches_naive() {
    let scores = GatingScores::new(random((7, 5), 2) * 3.0).unwrap();
    let naive = scores
        .values()
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|s| s.exp()).sum::<f64>().ln().powi(2))
        .sum::<f64>()
        / 7.0;
    assert!((z_loss(&scores) - naive).abs() < 1e-10);
    let zeros = GatingScores::new(Array2::zeros((3, 4))).unwrap();
    assert!((z_loss(&zeros) - 4f64.ln().powi(2)).abs() < 1e-15);
}

#[test]
fn noisy_gating_variance_is_softplus_squared() {
    const DRAWS: usize = 100_000;
    let x = random((2, 3), 3);
    let w_noise = random((4, 3), 4);
    let scores = GatingScores::new(random((2, 4), 5)).unwrap();
    let mut rng = seeded_rng(6);
    let mut sum = Array2::<f64>::zeros((2, 4));
    let mut sum_sq = Array2::<f64>::zeros((2, 4));
    for _ in 0..DRAWS {
        let noisy = noisy_gating_baseline(&scores, &x, &w_noise, &mut rng).unwrap();
        let delta = noisy.scores.values() - scores.values();
        sum += &delta;
        sum_sq += &delta.mapv(|v| v * v);
    }
    let mean = &sum / DRAWS as f64;
    let var = &sum_sq / DRAWS as f64 - mean.mapv(|v| v * v);
    let want = x.dot(&w_noise.t()).mapv(|v| (1.0 + v.exp()).ln().powi(2));
    // Sample variance of a normal has relative standard error sqrt(2 / N).
    let tol = 5.0 * (2.0 / DRAWS as f64).sqrt();
    for (v, w) in var.iter().zip(&want) {
        assert!((v / w - 1.0).abs() < tol, "{v} vs {w}");
    }
}

fn small_task(seed: u64) -> ssr_core::moe::SyntheticTask {
    make_synthetic_task(&TaskSpec {
        clusters: 4,
        d: 4,
        tokens: 64,
        seed,
        ..TaskSpec::default()
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let task = small_task(1);
    for regularizer in [Regularizer::None, Regularizer::LbLoss, Regularizer::ZLoss] {
        let config = RouterConfig {
            p: 0.5,
            ..RouterConfig::default()
        };
        let mut block = MoEBlock::new(4, 4, 8, 1.0, config, &mut seeded_rng(2)).unwrap();
        let before = block.clone();
        let options = TrainOptions {
            steps: 20,
            learning_rate: 0.0,
            regularizer,
            coefficient: 0.01,
            batch_size: 16,
            seed: 3,
        };
        train(&mut block, &task, &options).unwrap();
        assert_eq!(block, before);
    }
}

#[test]
fn full_batch_descent_is_monotone() {
    let task = small_task(4);
    let mut block = MoEBlock::new(4, 2, 8, 1.0, RouterConfig::vanilla(2), &mut seeded_rng(5)).unwrap();
    let shared = block.experts[0].clone();
    block.experts = vec![shared.clone(), shared];
    let options = TrainOptions {
        steps: 100,
        learning_rate: 0.01,
        batch_size: task.batch.len(),
        ..TrainOptions::default()
    };
    let losses: Vec<f64> = train(&mut block, &task, &options)
        .unwrap()
        .iter()
        .map(|r| r.loss)
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let task = small_task(6);
    let run = || {
        let config = RouterConfig {
            p: 0.3,
            alpha_noise: 0.5,
            ..RouterConfig::default()
        };
        let mut block = MoEBlock::new(4, 4, 8, 1.0, config, &mut seeded_rng(7)).unwrap();
        let options = TrainOptions {
            steps: 50,
            regularizer: Regularizer::NoisyGating,
            coefficient: 0.01,
            batch_size: 16,
            seed: 8,
            ..TrainOptions::default()
        };
        let losses: Vec<u64> = train(&mut block, &task, &options)
            .unwrap()
            .iter()
            .map(|r| r.loss.to_bits())
            .collect();
        (losses, block)
    };
    let (a, block_a) = run();
    let (b, block_b) = run();
    assert_eq!(a, b);
    assert_eq!(block_a, block_b);
}

#[test]
fn divergence_reports_step() {
    let task = small_task(9);
    let mut block = MoEBlock::new(4, 4, 8, 1.0, RouterConfig::vanilla(2), &mut seeded_rng(10)).unwrap();
    let options = TrainOptions {
        steps: 200,
        learning_rate: 1e8,
        ..TrainOptions::default()
    };
    match train(&mut block, &task, &options) {
        Err(Error::NonFiniteLoss { step }) => assert!(step < 200),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.len())),
    }
}

#[test]
fn checkpoint_round_trips() {
    let block = block(3, 4, 2, BranchOverride::ForceSoftmax, 11).with_noise_gate();
    let back = MoEBlock::from_checkpoint_json(&block.to_checkpoint_json().unwrap()).unwrap();
    assert_eq!(back, block);

    let mut broken: serde_json::Value = serde_json::from_str(&block.to_checkpoint_json().unwrap()).unwrap();
    broken["experts"].as_array_mut().unwrap().pop();
    assert!(MoEBlock::from_checkpoint_json(&broken.to_string()).is_err());
}

#[test]
fn batch_shape_is_checked() {
    let block = block(4, 3, 2, BranchOverride::ForceSoftmax, 12);
    let wrong = TokenBatch::new(random((2, 5), 13), None).unwrap();
    assert!(matches!(
        moe_forward(&block, &wrong, &mut seeded_rng(0)),
        Err(Error::DimensionMismatch(_))
    ));
    let bad_targets = TokenBatch::new(random((2, 4), 14), Some(random((3, 4), 15)));
    assert!(bad_targets.is_err());
    assert!(TokenBatch::new(Array2::zeros((0, 4)), None).is_err());
}
