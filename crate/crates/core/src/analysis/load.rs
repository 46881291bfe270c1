use serde::Serialize;

use crate::routing::RoutingDecision;

/// Expert-usage summary of one routing decision, for both the top-1 expert of
/// each token and its full top-k support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadStats {
    pub top1_counts: Vec<usize>,
    pub topk_counts: Vec<usize>,
    /// Sums to 1.
    pub top1_fractions: Vec<f64>,
    /// Sums to k.
    pub topk_fractions: Vec<f64>,
    /// Shannon entropy of the load distribution divided by ln n.
    pub top1_entropy: f64,
    pub topk_entropy: f64,
    /// Population standard deviation of the counts over their mean.
    pub top1_cv: f64,
    pub topk_cv: f64,
}

fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

fn coefficient_of_variation(counts: &[usize]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn load_stats(decision: &RoutingDecision, n: usize) -> LoadStats {
    let mut top1 = vec![0usize; n];
    let mut topk = vec![0usize; n];
    for t in &decision.tokens {
        top1[t.top1()] += 1;
        for &j in &t.support {
            topk[j] += 1;
        }
    }
    let m = decision.tokens.len().max(1) as f64;
    LoadStats {
        top1_fractions: top1.iter().map(|&c| c as f64 / m).collect(),
        topk_fractions: topk.iter().map(|&c| c as f64 / m).collect(),
        top1_entropy: normalized_entropy(&top1),
        topk_entropy: normalized_entropy(&topk),
        top1_cv: coefficient_of_variation(&top1),
        topk_cv: coefficient_of_variation(&topk),
        top1_counts: top1,
        topk_counts: topk,
    }
}
