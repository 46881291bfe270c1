//! Token-to-expert assignment: top-k softmax gating, transport-plan routing,
//! and the per-call random switch between them.

mod config;
mod kl;
mod router;

pub use config::{BranchOverride, Mode, RouterConfig};
pub use kl::{brute_force_best_support, kl_to_plan_row, BestSupport, BRUTE_FORCE_CAP};
pub use router::{
    renormalize_topk, sinkhorn_route, sinkhorn_route_detailed, softmax_route, ssr_route, ssr_route_detailed,
    topk_indices, RouteOutcome,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The m x n token-expert score matrix `S = X W_g^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingScores {
    values: Array2<f64>,
}

impl GatingScores {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (m, n) = values.dim();
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!("empty {m}x{n} score matrix")));
        }
        crate::ot::check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn token_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn expert_count(&self) -> usize {
        self.values.ncols()
    }
}

/// Which rule produced a [`RoutingDecision`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Softmax,
    Sinkhorn,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Softmax => "Softmax",
            Branch::Sinkhorn => "Sinkhorn",
        })
    }
}

/// Experts chosen for one token, ascending, with matching positive weights
/// that sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TokenRoute {
    /// Expert with the largest weight; ties go to the lower index.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for r in 1..self.support.len() {
            if self.weights[r] > self.weights[best] {
                best = r;
            }
        }
        self.support[best]
    }

    /// Weight on expert `j`, zero when `j` is not selected.
    pub fn weight_of(&self, j: usize) -> f64 {
        self.support
            .iter()
            .position(|&e| e == j)
            .map_or(0.0, |r| self.weights[r])
    }
}

/// Per-token supports and weights for a whole batch. This is the only thing a
/// router hands to the MoE forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub branch: Branch,
    pub tokens: Vec<TokenRoute>,
    /// Softmax branch only: the raw scores at each token's support, in support
    /// order. The backward pass differentiates through these.
    #[serde(skip)]
    pub selected_scores: Option<Vec<Vec<f64>>>,
}

impl RoutingDecision {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// The m x n weight matrix with zeros off the supports.
    pub fn dense_weights(&self, n: usize) -> Array2<f64> {
        let mut w = Array2::zeros((self.tokens.len(), n));
        for (i, t) in self.tokens.iter().enumerate() {
            for (&j, &a) in t.support.iter().zip(&t.weights) {
                w[[i, j]] = a;
            }
        }
        w
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks the structural invariants: `k` distinct ascending indices below
    /// `n`, positive weights summing to one within `tol`.
    pub fn validate(&self, k: usize, n: usize, tol: f64) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            if t.support.len() != k || t.weights.len() != k {
                return Err(Error::invalid(format!(
                    "token {i}: support size {} != k={k}",
                    t.support.len()
                )));
            }
            if t.support.windows(2).any(|w| w[0] >= w[1]) || t.support.iter().any(|&j| j >= n) {
                return Err(Error::invalid(format!("token {i}: bad support {:?}", t.support)));
            }
            if t.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::invalid(format!(
                    "token {i}: non-positive weight {:?}",
                    t.weights
                )));
            }
            let s: f64 = t.weights.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::invalid(format!("token {i}: weights sum to {s}")));
            }
        }
        Ok(())
    }
}
