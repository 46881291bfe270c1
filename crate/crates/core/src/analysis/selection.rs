use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::std_normal_cdf;
use crate::{Error, Result};

/// Per-expert probability of being the argmax of a noise-perturbed cost row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionProbs {
    pub probs: Vec<f64>,
    pub g: Vec<f64>,
    pub sigma: f64,
    pub alpha_noise: f64,
}

/// `P_i = prod_{j != i} Phi((g_i - g_j) / (sqrt(2) sigma alpha_noise))`.
///
/// The product treats the pairwise comparisons as independent. They share
/// the noise on `g_i`, so this is exact only for two experts; with three or
/// more the values need not sum to one (equal costs give `(1/2)^(n-1)` each).
pub fn selection_prob_formula(g: &[f64], sigma: f64, alpha_noise: f64) -> Result<SelectionProbs> {
    if !(alpha_noise > 0.0 && alpha_noise.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha_noise must be > 0 for the selection formula, got {alpha_noise}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if g.is_empty() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost row must be non-empty and finite"));
    }
    let scale = std::f64::consts::SQRT_2 * sigma * alpha_noise;
    let probs = g
        .iter()
        .enumerate()
        .map(|(i, gi)| {
            g.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, gj)| std_normal_cdf((gi - gj) / scale))
                .product()
        })
        .collect();
    Ok(SelectionProbs {
        probs,
        g: g.to_vec(),
        sigma,
        alpha_noise,
    })
}

/// Empirical argmax frequencies of `g + alpha_noise * eps`, eps ~ N(0, sigma^2).
/// Ties go to the lower index.
pub fn monte_carlo_selection<R: Rng + ?Sized>(
    g: &[f64],
    sigma: f64,
    alpha_noise: f64,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if g.is_empty() {
        return Err(Error::invalid("empty cost row"));
    }
    if !(alpha_noise >= 0.0) || !(sigma > 0.0) {
        return Err(Error::invalid("need alpha_noise >= 0 and sigma > 0"));
    }
    let scale = alpha_noise * sigma;
    let mut counts = vec![0u64; g.len()];
    for _ in 0..trials {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (i, gi) in g.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let v = gi + scale * z;
            if v > best_value {
                best = i;
                best_value = v;
            }
        }
        counts[best] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / trials as f64).collect())
}
