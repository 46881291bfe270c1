//! Named invariant and oracle checks, runnable from the command line.
//!
//! Each property has a dotted name (`ot.shift_invariance`, `prop1.optimality`,
//! ...) and is selected by substring. The transport solver is injectable so a
//! faulty double can be checked against the same suite.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{load_stats, monte_carlo_selection, selection_prob_formula, std_normal_cdf};
use crate::moe::{
    combine, moe_backward, moe_forward, train, MoEBlock, SyntheticTask, TaskSpec, TokenBatch, TrainOptions,
};
use crate::ot::{
    build_cost, marginal_residuals, oracle_entropic_ot, sinkhorn_maxcost, CostMatrix, CostMode, SinkhornDiagnostics,
    SinkhornParams, TransportPlan,
};
use crate::routing::{
    brute_force_best_support, kl_to_plan_row, renormalize_topk, sinkhorn_route, softmax_route, ssr_route, topk_indices,
    Branch, BranchOverride, GatingScores, Mode, RouterConfig,
};
use crate::{seeded_rng, Result, SeededRng};

/// Signature of a transport solver under test.
pub type Solver = fn(&CostMatrix, &SinkhornParams) -> Result<(TransportPlan, SinkhornDiagnostics)>;

/// A failing input, serializable for bug reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub property: String,
    pub message: String,
    pub input: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    /// Cases checked before the first failure, or in total.
    pub cases: usize,
    pub counterexample: Option<Counterexample>,
    #[serde(skip)]
    pub elapsed: Duration,
}

pub struct Verifier {
    pub solver: Solver,
    pub seed: u64,
}

impl Default for Verifier {
    fn default() -> Self {
        Self {
            solver: sinkhorn_maxcost,
            seed: 0,
        }
    }
}

type Check = std::result::Result<usize, (String, Value)>;

struct Property {
    name: &'static str,
    check: fn(&Verifier, &mut SeededRng) -> Check,
}

const PROPERTIES: &[Property] = &[
    Property {
        name: "ot.plan_feasibility",
        check: plan_feasibility,
    },
    Property {
        name: "ot.naive_matches_stabilized",
        check: naive_matches_stabilized,
    },
    Property {
        name: "ot.shift_invariance",
        check: shift_invariance,
    },
    Property {
        name: "ot.oracle_equivalence",
        check: oracle_equivalence,
    },
    Property {
        name: "ot.monotone_residuals",
        check: monotone_residuals,
    },
    Property {
        name: "ot.factorization",
        check: factorization,
    },
    Property {
        name: "prop1.optimality",
        check: prop1_optimality,
    },
    Property {
        name: "prop1.closed_form",
        check: prop1_closed_form,
    },
    Property {
        name: "prop2.inference_determinism",
        check: prop2_inference_determinism,
    },
    Property {
        name: "prop2.branch_frequency",
        check: prop2_branch_frequency,
    },
    Property {
        name: "routing.softmax_preserves_topk",
        check: softmax_preserves_topk,
    },
    Property {
        name: "routing.weights_valid",
        check: weights_valid,
    },
    Property {
        name: "moe.forward_equivalence",
        check: forward_equivalence,
    },
    Property {
        name: "moe.gradients",
        check: gradients,
    },
    Property {
        name: "moe.sinkhorn_detachment",
        check: sinkhorn_detachment,
    },
    Property {
        name: "moe.output_conservation",
        check: output_conservation,
    },
    Property {
        name: "moe.step_determinism",
        check: step_determinism,
    },
    Property {
        name: "prop3.positivity",
        check: prop3_positivity,
    },
    Property {
        name: "prop3.n2_exactness",
        check: prop3_n2_exactness,
    },
    Property {
        name: "prop3.lower_bound",
        check: prop3_lower_bound,
    },
    Property {
        name: "analysis.balance_ordering",
        check: balance_ordering,
    },
    Property {
        name: "analysis.frequencies_sum_to_one",
        check: frequencies_sum_to_one,
    },
];

/// Names of every property, in run order.
pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|p| p.name).collect()
}

impl Verifier {
    /// Runs every property whose name contains `filter` (all when `None`).
    /// Each property gets its own generator seeded from `seed` and its index,
    /// so filtering does not change what a property sees.
    pub fn run(&self, filter: Option<&str>) -> Vec<PropertyResult> {
        PROPERTIES
            .iter()
            .enumerate()
            .filter(|(_, p)| filter.is_none_or(|f| p.name.contains(f)))
            .map(|(i, p)| {
                let mut rng = seeded_rng(self.seed.wrapping_mul(1000).wrapping_add(i as u64));
                let start = Instant::now();
                let outcome = (p.check)(self, &mut rng);
                let elapsed = start.elapsed();
                match outcome {
                    Ok(cases) => PropertyResult {
                        name: p.name,
                        passed: true,
                        cases,
                        counterexample: None,
                        elapsed,
                    },
                    Err((message, input)) => PropertyResult {
                        name: p.name,
                        passed: false,
                        cases: 0,
                        counterexample: Some(Counterexample {
                            property: p.name.to_string(),
                            message,
                            input,
                        }),
                        elapsed,
                    },
                }
            })
            .collect()
    }

    fn solve(
        &self,
        cost: &CostMatrix,
        params: &SinkhornParams,
    ) -> std::result::Result<(TransportPlan, SinkhornDiagnostics), (String, Value)> {
        (self.solver)(cost, params).map_err(|e| (format!("solver error: {e}"), json!({ "cost": rows(cost.values()) })))
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn uniform(shape: (usize, usize), lo: f64, hi: f64, rng: &mut SeededRng) -> Array2<f64> {
    let u = Uniform::new(lo, hi).expect("valid range");
    Array2::from_shape_simple_fn(shape, || u.sample(rng))
}

fn normal(shape: (usize, usize), rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, (String, Value)> {
    r.map_err(|e| (format!("library error: {e}"), Value::Null))
}

fn random_cost(rng: &mut SeededRng, max_m: usize, max_n: usize) -> CostMatrix {
    let m = rng.random_range(1..=max_m);
    let n = rng.random_range(2..=max_n);
    CostMatrix::from_values(uniform((m, n), -3.0, 3.0, rng)).expect("finite")
}

fn plan_feasibility(v: &Verifier, rng: &mut SeededRng) -> Check {
    let params = SinkhornParams::default();
    let mut cases = 0;
    for _ in 0..20 {
        let s = lib(GatingScores::new(uniform((32, 8), -3.0, 3.0, rng)))?;
        for mode in [CostMode::Linear, CostMode::Softmax] {
            let cost = lib(build_cost(&s, mode))?;
            let (plan, diag) = v.solve(&cost, &params)?;
            if !diag.converged {
                continue;
            }
            let (row, col) = marginal_residuals(&plan);
            if plan.values.iter().any(|&p| !(p > 0.0)) || row >= params.delta || col >= params.delta {
                return Err((
                    format!("converged plan infeasible: row {row:e}, col {col:e}"),
                    json!({ "cost": rows(cost.values()), "mode": mode, "plan": rows(&plan.values) }),
                ));
            }
            cases += 1;
        }
    }
    Ok(cases)
}

fn naive_matches_stabilized(v: &Verifier, rng: &mut SeededRng) -> Check {
    let mut cases = 0;
    for _ in 0..100 {
        let cost = random_cost(rng, 8, 8);
        let xi = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let stable = SinkhornParams {
            xi,
            ..SinkhornParams::default()
        };
        let naive = SinkhornParams {
            stabilized: false,
            ..stable
        };
        let Ok((plain, _)) = (v.solver)(&cost, &naive) else {
            continue;
        };
        let (logd, _) = v.solve(&cost, &stable)?;
        let gap = max_abs_diff(&plain.values, &logd.values);
        if gap > 1e-8 {
            return Err((
                format!("naive and stabilized plans differ by {gap:e}"),
                json!({ "cost": rows(cost.values()), "xi": xi }),
            ));
        }
        cases += 1;
    }
    Ok(cases)
}

fn shift_invariance(v: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..50 {
        let cost = random_cost(rng, 8, 8);
        let c = rng.random_range(-5.0..5.0);
        let params = SinkhornParams::default();
        let (a, _) = v.solve(&cost, &params)?;
        let (b, _) = v.solve(&cost.shifted(c), &params)?;
        let gap = max_abs_diff(&a.values, &b.values);
        if gap > 1e-8 {
            return Err((
                format!("shift by {c} moved the plan by {gap:e} (case {case})"),
                json!({ "cost": rows(cost.values()), "shift": c }),
            ));
        }
    }
    Ok(50)
}

fn oracle_equivalence(v: &Verifier, rng: &mut SeededRng) -> Check {
    let mut cases = 0;
    for m in 1..=4 {
        for n in 1..=4 {
            for _ in 0..50 {
                let cost = CostMatrix::from_values(uniform((m, n), -3.0, 3.0, rng)).expect("finite");
                let xi = if rng.random_bool(0.5) { 0.5 } else { 1.0 };
                let params = SinkhornParams {
                    xi,
                    delta: 1e-12,
                    max_iter: 100_000,
                    stabilized: true,
                };
                let (plan, _) = v.solve(&cost, &params)?;
                let oracle = lib(oracle_entropic_ot(&cost, xi))?;
                let gap = max_abs_diff(&plan.values, &oracle.values);
                if !(gap <= 1e-6) {
                    return Err((
                        format!("plan differs from the oracle by {gap:e}"),
                        json!({
                            "cost": rows(cost.values()),
                            "xi": xi,
                            "plan": rows(&plan.values),
                            "oracle": rows(&oracle.values),
                        }),
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn monotone_residuals(v: &Verifier, rng: &mut SeededRng) -> Check {
    let mut cases = 0;
    for _ in 0..100 {
        let cost = random_cost(rng, 16, 8);
        let (_, diag) = v.solve(&cost, &SinkhornParams::default())?;
        if !diag.converged {
            continue;
        }
        // The final residual is measured on the materialized plan, the first
        // inside the loop; allow for rounding in the two summations.
        let slack = 64.0 * f64::EPSILON * (cost.rows() + cost.cols()) as f64;
        let last = diag.final_row_residual.max(diag.final_col_residual);
        if last > diag.first_residual + slack {
            return Err((
                format!("final residual {last:e} exceeds first {:e}", diag.first_residual),
                json!({ "cost": rows(cost.values()) }),
            ));
        }
        cases += 1;
    }
    Ok(cases)
}

fn factorization(v: &Verifier, rng: &mut SeededRng) -> Check {
    for _ in 0..50 {
        let cost = random_cost(rng, 16, 8);
        let params = SinkhornParams::default();
        let (plan, _) = v.solve(&cost, &params)?;
        let rebuilt = plan.reconstruct(&cost, params.xi);
        let rel = (&rebuilt - &plan.values)
            .iter()
            .zip(&plan.values)
            .fold(0.0, |m: f64, (d, p)| m.max(d.abs() / p.abs()));
        if !(rel <= 1e-10) {
            return Err((
                format!("factorized plan off by {rel:e} relative"),
                json!({ "cost": rows(cost.values()) }),
            ));
        }
    }
    Ok(50)
}

fn random_plan_row(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn prop1_optimality(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..200 {
        let k = 1 + case % 3;
        let n = rng.random_range(k.max(2)..=8);
        let row = random_plan_row(rng, n);
        let route = lib(renormalize_topk(&row, k))?;
        let kl = lib(kl_to_plan_row(&route, &row))?;
        let best = lib(brute_force_best_support(&row, k))?;
        let tie = (kl - best.kl).abs() <= 1e-12;
        if kl - best.kl > 1e-12 || (route.support != best.route.support && !tie) {
            return Err((
                format!("renormalized KL {kl} vs brute-force {}", best.kl),
                json!({ "row": row, "k": k, "support": route.support, "best": best.route.support }),
            ));
        }
    }
    Ok(200)
}

fn prop1_closed_form(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..200 {
        let k = 1 + case % 3;
        let n = rng.random_range(k.max(2)..=8);
        let row = random_plan_row(rng, n);
        let route = lib(renormalize_topk(&row, k))?;
        let kl = lib(kl_to_plan_row(&route, &row))?;
        let closed = -route.support.iter().map(|&j| row[j]).sum::<f64>().ln();
        if (kl - closed).abs() > 1e-10 {
            return Err((
                format!("KL {kl} vs closed form {closed}"),
                json!({ "row": row, "k": k }),
            ));
        }
    }
    Ok(200)
}

fn prop2_inference_determinism(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..50 {
        let s = lib(GatingScores::new(normal((8, 4), rng)))?;
        let config = RouterConfig {
            p: rng.random_range(0.0..=1.0),
            mode: Mode::Inference,
            alpha_noise: 1.0,
            ..RouterConfig::default()
        };
        let a = lib(ssr_route(&s, &config, &mut seeded_rng(case)))?;
        let b = lib(ssr_route(&s, &config, &mut seeded_rng(case + 1000)))?;
        if a.branch != Branch::Softmax || lib(a.to_json())? != lib(b.to_json())? {
            return Err((
                "inference routing depends on the generator".into(),
                json!({ "scores": rows(s.values()), "p": config.p }),
            ));
        }
    }
    Ok(50)
}

fn prop2_branch_frequency(_: &Verifier, rng: &mut SeededRng) -> Check {
    let s = lib(GatingScores::new(normal((8, 4), rng)))?;
    let calls = 10_000;
    for p in [0.01, 0.5] {
        let config = RouterConfig {
            p,
            ..RouterConfig::default()
        };
        let mut hits = 0;
        for _ in 0..calls {
            if lib(ssr_route(&s, &config, rng))?.branch == Branch::Sinkhorn {
                hits += 1;
            }
        }
        let freq = hits as f64 / calls as f64;
        let band = 3.0 * (p * (1.0 - p) / calls as f64).sqrt();
        if (freq - p).abs() > band {
            return Err((
                format!("Sinkhorn frequency {freq} outside {p} +/- {band}"),
                json!({ "p": p, "calls": calls, "hits": hits }),
            ));
        }
    }
    Ok(2 * calls)
}

fn softmax_preserves_topk(_: &Verifier, rng: &mut SeededRng) -> Check {
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=n);
        let s = lib(GatingScores::new(uniform((1, n), -5.0, 5.0, rng)))?;
        let soft = lib(build_cost(&s, CostMode::Softmax))?;
        let raw = s.values().row(0).to_vec();
        let a = lib(topk_indices(&raw, k))?;
        let b = lib(topk_indices(&soft.values().row(0).to_vec(), k))?;
        if a != b {
            return Err(("softmax reordered the top-k".into(), json!({ "row": raw, "k": k })));
        }
    }
    Ok(200)
}

fn weights_valid(_: &Verifier, rng: &mut SeededRng) -> Check {
    let overrides = [
        Some(BranchOverride::ForceSoftmax),
        Some(BranchOverride::ForceSinkhorn),
        Some(BranchOverride::ForceNoise),
        Some(BranchOverride::ForceBoth),
        None,
    ];
    let mut cases = 0;
    for _ in 0..20 {
        let s = lib(GatingScores::new(normal((16, 6), rng)))?;
        for branch_override in overrides {
            for cost_mode in [CostMode::Linear, CostMode::Softmax] {
                let config = RouterConfig {
                    k: 3,
                    p: 0.5,
                    alpha_noise: 0.5,
                    cost_mode,
                    branch_override,
                    ..RouterConfig::default()
                };
                let d = lib(ssr_route(&s, &config, rng))?;
                if let Err(e) = d.validate(3, 6, 1e-12) {
                    return Err((e.to_string(), json!({ "scores": rows(s.values()), "config": config })));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn small_block(rng: &mut SeededRng, branch: BranchOverride) -> Result<(MoEBlock, TokenBatch)> {
    let config = RouterConfig {
        branch_override: Some(branch),
        ..RouterConfig::default()
    };
    let block = MoEBlock::new(4, 4, 8, 1.0, config, rng)?;
    let batch = TokenBatch::new(normal((6, 4), rng), Some(normal((6, 4), rng)))?;
    Ok((block, batch))
}

fn forward_equivalence(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..20 {
        let branch = if case % 2 == 0 {
            BranchOverride::ForceSoftmax
        } else {
            BranchOverride::ForceSinkhorn
        };
        let (block, batch) = lib(small_block(rng, branch))?;
        let fwd = lib(moe_forward(&block, &batch, rng))?;
        let weights = fwd.decision.dense_weights(block.expert_count());
        let mut dense = Array2::<f64>::zeros(batch.x.raw_dim());
        for (i, x) in batch.x.rows().into_iter().enumerate() {
            for (j, expert) in block.experts.iter().enumerate() {
                dense.row_mut(i).scaled_add(weights[[i, j]], &expert.forward(x));
            }
        }
        let gap = max_abs_diff(&dense, &fwd.outputs);
        if gap > 1e-12 {
            return Err((
                format!("sparse and dense outputs differ by {gap:e}"),
                json!({ "case": case }),
            ));
        }
    }
    Ok(20)
}

fn mse(y: &Array2<f64>, t: &Array2<f64>) -> f64 {
    (y - t).mapv(|v| v * v).sum() / y.len() as f64
}

/// Largest relative gap between analytic and central-difference gradients.
/// `loss` must hold the routing fixed where the analytic pass does.
fn fd_gap(block: &MoEBlock, analytic: Vec<&[f64]>, skip: usize, loss: impl Fn(&MoEBlock) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for (slot, grad) in analytic.iter().enumerate().skip(skip) {
        for (idx, &a) in grad.iter().enumerate() {
            let bump = |h: f64| {
                let mut b = block.clone();
                b.parameters_mut().nth(slot).expect("slot")[idx] += h;
                loss(&b)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn gradients(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..6 {
        let branch = if case % 2 == 0 {
            BranchOverride::ForceSoftmax
        } else {
            BranchOverride::ForceSinkhorn
        };
        let (mut block, batch) = lib(small_block(rng, branch))?;
        if case >= 4 {
            block = block.with_noise_gate();
            block.noise_gate = Some(normal((4, 4), rng) * 0.5);
        }
        let targets = batch.targets.clone().expect("targets");
        let fwd = lib(moe_forward(&block, &batch, rng))?;
        let upstream = (&fwd.outputs - &targets) * (2.0 / targets.len() as f64);
        let grads = lib(moe_backward(&block, &batch, &fwd, &upstream))?;
        let frozen_noise = fwd.gating_noise.clone();
        let frozen = fwd.decision.clone();
        let loss = |b: &MoEBlock| {
            let decision = if frozen.branch == Branch::Sinkhorn {
                frozen.clone()
            } else {
                let mut s = batch.x.dot(&b.gate.t());
                if let (Some(w), Some(eps)) = (&b.noise_gate, &frozen_noise) {
                    s = s + eps * &batch.x.dot(&w.t()).mapv(|v| v.exp().ln_1p());
                }
                softmax_route(&GatingScores::new(s).expect("finite"), b.config.k).expect("routable")
            };
            mse(&combine(b, &batch.x, &decision).expect("combine"), &targets)
        };
        let skip = usize::from(frozen.branch == Branch::Sinkhorn);
        let gap = fd_gap(&block, grads.slices().collect(), skip, loss);
        if !(gap <= 1e-4) {
            return Err((
                format!("analytic vs finite-difference relative gap {gap:e}"),
                json!({ "case": case, "branch": frozen.branch }),
            ));
        }
    }
    Ok(6)
}

fn sinkhorn_detachment(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..20 {
        let (block, batch) = lib(small_block(rng, BranchOverride::ForceSinkhorn))?;
        let fwd = lib(moe_forward(&block, &batch, rng))?;
        let upstream = normal(batch.x.dim(), rng);
        let grads = lib(moe_backward(&block, &batch, &fwd, &upstream))?;
        if grads.gate.iter().any(|&g| g != 0.0) {
            return Err((
                "gate gradient non-zero on the Sinkhorn branch".into(),
                json!({ "case": case }),
            ));
        }
    }
    Ok(20)
}

fn output_conservation(_: &Verifier, rng: &mut SeededRng) -> Check {
    for case in 0..20 {
        let branch = if case % 2 == 0 {
            BranchOverride::ForceSoftmax
        } else {
            BranchOverride::ForceSinkhorn
        };
        let (mut block, batch) = lib(small_block(rng, branch))?;
        let first = block.experts[0].clone();
        block.experts.iter_mut().for_each(|e| *e = first.clone());
        let fwd = lib(moe_forward(&block, &batch, rng))?;
        for (i, x) in batch.x.rows().into_iter().enumerate() {
            let want = first.forward(x);
            let gap = (&fwd.outputs.row(i) - &want)
                .iter()
                .fold(0.0, |m: f64, v| m.max(v.abs()));
            if gap > 1e-12 {
                return Err((format!("token {i} output moved by {gap:e}"), json!({ "case": case })));
            }
        }
    }
    Ok(20)
}

fn step_determinism(_: &Verifier, rng: &mut SeededRng) -> Check {
    let spec = TaskSpec {
        tokens: 128,
        d: 4,
        clusters: 4,
        seed: rng.random(),
        ..TaskSpec::default()
    };
    let task: SyntheticTask = lib(crate::moe::make_synthetic_task(&spec))?;
    let options = TrainOptions {
        steps: 30,
        batch_size: 32,
        seed: rng.random(),
        ..TrainOptions::default()
    };
    let config = RouterConfig {
        p: 0.3,
        alpha_noise: 0.5,
        ..RouterConfig::default()
    };
    let init_seed: u64 = rng.random();
    let run = || -> Result<Vec<u64>> {
        let mut block = MoEBlock::new(4, 4, 8, 1.0, config.clone(), &mut seeded_rng(init_seed))?;
        Ok(train(&mut block, &task, &options)?
            .iter()
            .map(|r| r.loss.to_bits())
            .collect())
    };
    let (a, b) = (lib(run())?, lib(run())?);
    if a != b {
        return Err((
            "repeated training diverged".into(),
            json!({ "task": spec, "options": options }),
        ));
    }
    Ok(a.len())
}

fn prop3_positivity(_: &Verifier, rng: &mut SeededRng) -> Check {
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma = rng.random_range(0.5..2.0);
        let alpha = rng.random_range(0.3..4.0);
        let formula = lib(selection_prob_formula(&g, sigma, alpha))?.probs;
        // Enough trials to expect at least 30 hits on the rarest expert; rows
        // needing more than 10^6 are checked through the formula only.
        let rarest = formula.iter().cloned().fold(1.0, f64::min);
        let trials = (30.0 / rarest).ceil().max(1000.0);
        let mc = if trials <= 1e6 {
            lib(monte_carlo_selection(&g, sigma, alpha, trials as usize, rng))?
        } else {
            Vec::new()
        };
        if formula.iter().chain(&mc).any(|&p| !(p > 0.0)) {
            return Err((
                "zero selection probability under noise".into(),
                json!({ "g": g, "sigma": sigma, "alpha_noise": alpha, "formula": formula, "monte_carlo": mc }),
            ));
        }
    }
    Ok(50)
}

fn prop3_n2_exactness(_: &Verifier, rng: &mut SeededRng) -> Check {
    let trials = 1_000_000;
    for _ in 0..20 {
        let g = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let sigma = rng.random_range(0.5..2.0);
        let alpha = rng.random_range(0.25..2.0);
        let formula = lib(selection_prob_formula(&g, sigma, alpha))?.probs;
        let mc = lib(monte_carlo_selection(&g, sigma, alpha, trials, rng))?;
        for (p, f) in formula.iter().zip(&mc) {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            if (p - f).abs() > 3.0 * se {
                return Err((
                    format!("formula {p} vs Monte Carlo {f} beyond 3 SE ({se:e})"),
                    json!({ "g": g, "sigma": sigma, "alpha_noise": alpha }),
                ));
            }
        }
    }
    Ok(20)
}

fn prop3_lower_bound(_: &Verifier, rng: &mut SeededRng) -> Check {
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let s = lib(GatingScores::new(uniform((1, n), -4.0, 4.0, rng)))?;
        let g = lib(build_cost(&s, CostMode::Softmax))?.values().row(0).to_vec();
        let sigma = rng.random_range(0.3..2.0);
        let alpha = rng.random_range(0.3..4.0);
        let bound = std_normal_cdf(-1.0 / (std::f64::consts::SQRT_2 * sigma * alpha)).powi(n as i32 - 1);
        let probs = lib(selection_prob_formula(&g, sigma, alpha))?.probs;
        if let Some(p) = probs.iter().find(|&&p| p < bound) {
            return Err((
                format!("probability {p} below bound {bound}"),
                json!({ "g": g, "sigma": sigma, "alpha_noise": alpha }),
            ));
        }
    }
    Ok(200)
}

fn balance_ordering(_: &Verifier, rng: &mut SeededRng) -> Check {
    let (m, n) = (160, 16);
    let config = RouterConfig::default();
    for seed in 0..20 {
        let mut v = normal((m, n), rng);
        v.column_mut(0).mapv_inplace(|x| x + 2.0);
        let s = lib(GatingScores::new(v))?;
        let soft = load_stats(&lib(softmax_route(&s, config.k))?, n).top1_cv;
        let sink = load_stats(&lib(sinkhorn_route(&s, &config, rng))?, n).top1_cv;
        if !(sink < soft) {
            return Err((
                format!("Sinkhorn top-1 CV {sink} not below softmax {soft}"),
                json!({ "seed": seed, "scores": rows(s.values()) }),
            ));
        }
    }
    Ok(20)
}

fn frequencies_sum_to_one(_: &Verifier, rng: &mut SeededRng) -> Check {
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alpha = rng.random_range(0.0..2.0);
        let mc = lib(monte_carlo_selection(&g, 1.0, alpha, 1000, rng))?;
        let total: f64 = mc.iter().sum();
        if (total - 1.0).abs() > 1e-12 || mc.iter().any(|&f| f < 0.0) {
            return Err((
                format!("frequencies sum to {total}"),
                json!({ "g": g, "alpha_noise": alpha }),
            ));
        }
    }
    Ok(50)
}
