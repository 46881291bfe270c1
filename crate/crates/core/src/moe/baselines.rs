//! Regularizers used by the comparison routers: the switch-style
//! load-balancing loss, the router z-loss, and trainable noisy gating.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ot::softmax_rows;
use crate::routing::{GatingScores, RoutingDecision};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    LbLoss,
    ZLoss,
    /// Trainable noisy gating plus the load-balancing loss.
    NoisyGating,
}

/// Fraction of tokens whose top-1 expert is j.
fn dispatch_fractions(decision: &RoutingDecision, n: usize) -> Vec<f64> {
    let mut f = vec![0.0; n];
    for t in &decision.tokens {
        f[t.top1()] += 1.0;
    }
    let m = decision.tokens.len() as f64;
    f.iter_mut().for_each(|v| *v /= m);
    f
}

/// `n * sum_j f_j q_j` with `f_j` the top-1 dispatch fraction and `q_j` the
/// batch-mean softmax gate probability.
pub fn lb_aux_loss(decision: &RoutingDecision, scores: &GatingScores) -> f64 {
    let n = scores.expert_count();
    let f = dispatch_fractions(decision, n);
    let q = softmax_rows(scores.values()).mean_axis(Axis(0)).unwrap();
    n as f64 * f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()
}

/// Gradient of [`lb_aux_loss`] with respect to the scores, holding the
/// dispatch fractions fixed.
pub fn lb_aux_loss_grad(decision: &RoutingDecision, scores: &GatingScores) -> Array2<f64> {
    let (m, n) = scores.values().dim();
    let f = dispatch_fractions(decision, n);
    let mut probs = softmax_rows(scores.values());
    let scale = n as f64 / m as f64;
    for mut row in probs.rows_mut() {
        let fp: f64 = row.iter().zip(&f).map(|(p, fj)| p * fj).sum();
        for (p, fj) in row.iter_mut().zip(&f) {
            *p = scale * *p * (fj - fp);
        }
    }
    probs
}

fn row_logsumexp(scores: &GatingScores) -> Vec<f64> {
    scores
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Mean over tokens of the squared log-sum-exp of the scores.
pub fn z_loss(scores: &GatingScores) -> f64 {
    let lse = row_logsumexp(scores);
    lse.iter().map(|v| v * v).sum::<f64>() / lse.len() as f64
}

pub fn z_loss_grad(scores: &GatingScores) -> Array2<f64> {
    let lse = row_logsumexp(scores);
    let m = lse.len() as f64;
    let mut probs = softmax_rows(scores.values());
    for (mut row, l) in probs.rows_mut().into_iter().zip(&lse) {
        row.mapv_inplace(|p| 2.0 * l * p / m);
    }
    probs
}

/// Output of [`noisy_gating_baseline`].
#[derive(Debug, Clone)]
pub struct NoisyScores {
    pub scores: GatingScores,
    /// Standard-normal draws, kept for the backward pass.
    pub eps: Array2<f64>,
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// `S + eps * softplus(X W_noise^T)` with eps standard normal.
pub fn noisy_gating_baseline<R: Rng + ?Sized>(
    scores: &GatingScores,
    x: &Array2<f64>,
    noise_weights: &Array2<f64>,
    rng: &mut R,
) -> Result<NoisyScores> {
    let (m, n) = scores.values().dim();
    if noise_weights.dim() != (n, x.ncols()) || x.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "noise weights {:?} for scores {m}x{n} and inputs {:?}",
            noise_weights.dim(),
            x.dim()
        )));
    }
    let std = x.dot(&noise_weights.t()).mapv(softplus);
    let eps = Array2::from_shape_simple_fn((m, n), || StandardNormal.sample(rng));
    let noisy = scores.values() + &(&eps * &std);
    Ok(NoisyScores {
        scores: GatingScores::new(noisy)?,
        eps,
    })
}
