use rand::Rng;

use super::{Branch, BranchOverride, GatingScores, Mode, RouterConfig, RoutingDecision, TokenRoute};
use crate::ot::{self, build_cost, inject_noise, SinkhornDiagnostics, TransportPlan};
use crate::{Error, Result};

/// Indices of the `k` largest entries of `row`, returned in ascending order.
/// Equal values prefer the lower index.
pub fn topk_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(Error::invalid(format!("k={k} outside 1..={}", row.len())));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Top-k by raw score, then softmax over the selected scores only.
pub fn softmax_route(scores: &GatingScores, k: usize) -> Result<RoutingDecision> {
    let mut tokens = Vec::with_capacity(scores.token_count());
    let mut selected = Vec::with_capacity(scores.token_count());
    for row in scores.values().rows() {
        let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
        let support = topk_indices(&row, k)?;
        let picked: Vec<f64> = support.iter().map(|&j| row[j]).collect();
        let max = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = picked.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        tokens.push(TokenRoute {
            support,
            weights: exps.iter().map(|e| e / total).collect(),
        });
        selected.push(picked);
    }
    Ok(RoutingDecision {
        branch: Branch::Softmax,
        tokens,
        selected_scores: Some(selected),
    })
}

/// Keeps the `k` largest entries of a transport-plan row and rescales them to
/// sum to one. This is the KL projection of the row onto k-sparse
/// distributions.
pub fn renormalize_topk(plan_row: &[f64], k: usize) -> Result<TokenRoute> {
    if let Some(j) = plan_row.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "plan entry {j} = {} is not strictly positive",
            plan_row[j]
        )));
    }
    let support = topk_indices(plan_row, k)?;
    let mass: f64 = support.iter().map(|&j| plan_row[j]).sum();
    let weights = support.iter().map(|&j| plan_row[j] / mass).collect();
    Ok(TokenRoute { support, weights })
}

/// A routing decision plus, when the Sinkhorn branch ran, the plan it used.
#[derive(Debug, Clone)]
pub struct RouteOutcome {
    pub decision: RoutingDecision,
    pub transport: Option<(TransportPlan, SinkhornDiagnostics)>,
}

/// Builds the cost, perturbs it when `alpha_noise > 0`, solves for the
/// transport plan and renormalizes each row's top-k.
pub fn sinkhorn_route_detailed<R: Rng + ?Sized>(
    scores: &GatingScores,
    config: &RouterConfig,
    rng: &mut R,
) -> Result<RouteOutcome> {
    config.validate(Some(scores.expert_count()))?;
    let mut cost = build_cost(scores, config.cost_mode)?;
    if config.alpha_noise > 0.0 {
        cost = inject_noise(&cost, config.alpha_noise, config.sigma, rng)?;
    }
    let (plan, diagnostics) = ot::sinkhorn_maxcost(&cost, &config.sinkhorn_params())?;
    // Even the log-domain solver must exponentiate at the end; at small xi
    // the plan can span more than the f64 exponent range.
    if let Some(((row, col), _)) = plan.values.indexed_iter().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Underflow {
            row,
            col,
            diagnostics: Box::new(diagnostics),
        });
    }
    let tokens = plan
        .values
        .rows()
        .into_iter()
        .map(|row| renormalize_topk(&row.to_vec(), config.k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RouteOutcome {
        decision: RoutingDecision {
            branch: Branch::Sinkhorn,
            tokens,
            selected_scores: None,
        },
        transport: Some((plan, diagnostics)),
    })
}

pub fn sinkhorn_route<R: Rng + ?Sized>(
    scores: &GatingScores,
    config: &RouterConfig,
    rng: &mut R,
) -> Result<RoutingDecision> {
    sinkhorn_route_detailed(scores, config, rng).map(|o| o.decision)
}

fn softmax_outcome(scores: &GatingScores, k: usize) -> Result<RouteOutcome> {
    Ok(RouteOutcome {
        decision: softmax_route(scores, k)?,
        transport: None,
    })
}

/// Selective routing. In training one uniform draw per call picks the
/// Sinkhorn branch with probability `p`; in inference the softmax branch is
/// always used and the generator is left untouched. An override skips the
/// draw.
pub fn ssr_route_detailed<R: Rng + ?Sized>(
    scores: &GatingScores,
    config: &RouterConfig,
    rng: &mut R,
) -> Result<RouteOutcome> {
    config.validate(Some(scores.expert_count()))?;
    let noiseless = || RouterConfig {
        alpha_noise: 0.0,
        ..config.clone()
    };
    match (config.branch_override, config.mode) {
        (Some(BranchOverride::ForceSoftmax), _) | (None, Mode::Inference) => softmax_outcome(scores, config.k),
        (Some(BranchOverride::ForceSinkhorn), _) => sinkhorn_route_detailed(scores, &noiseless(), rng),
        (Some(BranchOverride::ForceBoth), _) => sinkhorn_route_detailed(scores, config, rng),
        (Some(BranchOverride::ForceNoise), _) => {
            let mut noisy = scores.values().clone();
            ot::add_gaussian(&mut noisy, config.alpha_noise, config.sigma, rng)?;
            softmax_outcome(&GatingScores::new(noisy)?, config.k)
        }
        (None, Mode::Train) => {
            let tau: f64 = rng.random();
            if tau < config.p {
                sinkhorn_route_detailed(scores, config, rng)
            } else {
                softmax_outcome(scores, config.k)
            }
        }
    }
}

pub fn ssr_route<R: Rng + ?Sized>(
    scores: &GatingScores,
    config: &RouterConfig,
    rng: &mut R,
) -> Result<RoutingDecision> {
    ssr_route_detailed(scores, config, rng).map(|o| o.decision)
}
