use itertools::Itertools;

use super::TokenRoute;
use crate::{Error, Result};

/// Largest row length [`brute_force_best_support`] will enumerate.
pub const BRUTE_FORCE_CAP: usize = 12;

/// `KL(alpha || plan_row)` summed over the support of `alpha`.
pub fn kl_to_plan_row(route: &TokenRoute, plan_row: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (&j, &a) in route.support.iter().zip(&route.weights) {
        let p = *plan_row
            .get(j)
            .ok_or_else(|| Error::invalid(format!("support index {j} outside row of {}", plan_row.len())))?;
        if !(p > 0.0) {
            return Err(Error::invalid(format!("support index {j} has plan mass {p}")));
        }
        if a > 0.0 {
            kl += a * (a / p).ln();
        }
    }
    Ok(kl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSupport {
    pub route: TokenRoute,
    pub kl: f64,
}

/// Tries every k-subset of the row, renormalizes inside it, and keeps the one
/// with the smallest KL to the row. Subsets are visited in lexicographic
/// order and only a strictly smaller KL replaces the incumbent.
pub fn brute_force_best_support(plan_row: &[f64], k: usize) -> Result<BestSupport> {
    let n = plan_row.len();
    if n > BRUTE_FORCE_CAP {
        return Err(Error::TooLarge {
            what: "the brute-force support search",
            rows: 1,
            cols: n,
            cap: BRUTE_FORCE_CAP,
        });
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} outside 1..={n}")));
    }
    let mut best: Option<BestSupport> = None;
    for support in (0..n).combinations(k) {
        let mass: f64 = support.iter().map(|&j| plan_row[j]).sum();
        let weights = support.iter().map(|&j| plan_row[j] / mass).collect();
        let route = TokenRoute { support, weights };
        let kl = kl_to_plan_row(&route, plan_row)?;
        if best.as_ref().is_none_or(|b| kl < b.kl) {
            best = Some(BestSupport { route, kl });
        }
    }
    Ok(best.expect("at least one subset"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::renormalize_topk;

    #[test]
    fn identical_distributions_have_zero_kl() {
        let row = [0.2, 0.3, 0.5];
        let r = renormalize_topk(&row, 3).unwrap();
        assert!(kl_to_plan_row(&r, &row).unwrap().abs() < 1e-15);
    }

    #[test]
    fn closed_form_example() {
        let row = [0.5, 0.3, 0.2];
        let r = renormalize_topk(&row, 2).unwrap();
        let kl = kl_to_plan_row(&r, &row).unwrap();
        assert!((kl - 0.223_143_551_314_209_76).abs() < 1e-15, "{kl}");
    }

    #[test]
    fn zero_plan_entry_rejected() {
        let r = TokenRoute {
            support: vec![1],
            weights: vec![1.0],
        };
        assert!(kl_to_plan_row(&r, &[0.5, 0.0]).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let b = brute_force_best_support(&[0.5, 0.3, 0.2], 2).unwrap();
        assert_eq!(b.route.support, vec![0, 1]);
        let b = brute_force_best_support(&[0.25, 0.25, 0.5], 3).unwrap();
        assert!(b.kl.abs() < 1e-15);
        // Ties resolve to the lexicographically smallest subset.
        let b = brute_force_best_support(&[0.25, 0.25, 0.25, 0.25], 2).unwrap();
        assert_eq!(b.route.support, vec![0, 1]);
        assert!(brute_force_best_support(&[0.1; 13], 2).is_err());
    }
}
