use serde::{Deserialize, Serialize};

use crate::ot::{CostMode, SinkhornParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

/// Pins the branch instead of drawing it. Used for the inference-strategy
/// ablation: softmax, Sinkhorn, noisy softmax, and noisy Sinkhorn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchOverride {
    ForceSoftmax,
    /// Sinkhorn routing without cost noise.
    ForceSinkhorn,
    /// Softmax routing on noise-perturbed scores.
    ForceNoise,
    /// Sinkhorn routing on a noise-perturbed cost.
    ForceBoth,
}

/// Every routing hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    /// Probability of taking the Sinkhorn branch on a training call.
    pub p: f64,
    pub xi: f64,
    pub delta: f64,
    /// Sinkhorn iteration cap.
    pub eta: usize,
    pub k: usize,
    pub cost_mode: CostMode,
    pub alpha_noise: f64,
    pub sigma: f64,
    pub mode: Mode,
    pub branch_override: Option<BranchOverride>,
    pub stabilized: bool,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            p: 0.001,
            xi: 0.5,
            delta: 1e-4,
            eta: 100,
            k: 2,
            cost_mode: CostMode::Softmax,
            alpha_noise: 0.0,
            sigma: 1.0,
            mode: Mode::Train,
            branch_override: None,
            stabilized: true,
            seed: 0,
        }
    }
}

impl RouterConfig {
    /// Plain top-k softmax gating: `p = 0`, no noise.
    pub fn vanilla(k: usize) -> Self {
        Self {
            p: 0.0,
            k,
            ..Self::default()
        }
    }

    pub fn sinkhorn_params(&self) -> SinkhornParams {
        SinkhornParams {
            xi: self.xi,
            delta: self.delta,
            max_iter: self.eta,
            stabilized: self.stabilized,
        }
    }

    /// Checks ranges; `experts` additionally checks `k <= n`.
    pub fn validate(&self, experts: Option<usize>) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if let Some(n) = experts {
            if self.k > n {
                return Err(Error::invalid(format!("k={} exceeds expert count {n}", self.k)));
            }
        }
        if !(self.alpha_noise >= 0.0 && self.alpha_noise.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha_noise must be >= 0, got {}",
                self.alpha_noise
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        self.sinkhorn_params().validate()
    }
}
