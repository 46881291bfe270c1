//! Reference solver for tiny transport problems.
//!
//! Works on the dual potentials directly: a few sweeps of exact coordinate
//! ascent to get into the basin, then damped Newton steps on the full dual
//! with a dense linear solve. Every marginal is accumulated with compensated
//! summation. Nothing here shares code with the Sinkhorn iteration, which is
//! the point: the two must agree without being able to inherit each other's
//! mistakes.

use ndarray::{Array1, Array2};

use super::{CostMatrix, TransportPlan};
use crate::{Error, Result};

/// Largest row or column count the oracle accepts.
pub const ORACLE_CAP: usize = 6;

/// L1 marginal residual the oracle drives to.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

const WARM_SWEEPS: usize = 25;
const MAX_NEWTON: usize = 200;

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + compensated_sum(values.iter().map(|v| (v - max).exp())).ln()
}

struct Dual<'a> {
    kernel_log: &'a Array2<f64>,
    row_target: Array1<f64>,
    col_target: Array1<f64>,
}

impl Dual<'_> {
    fn plan(&self, a: &[f64], b: &[f64]) -> Array2<f64> {
        let mut p = self.kernel_log.clone();
        for ((i, j), v) in p.indexed_iter_mut() {
            *v = (a[i] + *v + b[j]).exp();
        }
        p
    }

    fn row_sums(p: &Array2<f64>) -> Vec<f64> {
        p.rows()
            .into_iter()
            .map(|r| compensated_sum(r.iter().copied()))
            .collect()
    }

    fn col_sums(p: &Array2<f64>) -> Vec<f64> {
        p.columns()
            .into_iter()
            .map(|c| compensated_sum(c.iter().copied()))
            .collect()
    }

    fn residual(&self, p: &Array2<f64>) -> f64 {
        let rows = Self::row_sums(p);
        let cols = Self::col_sums(p);
        compensated_sum(
            rows.iter()
                .zip(&self.row_target)
                .chain(cols.iter().zip(&self.col_target))
                .map(|(x, t)| (x - t).abs()),
        )
    }

    fn objective(&self, a: &[f64], b: &[f64]) -> f64 {
        let p = self.plan(a, b);
        compensated_sum(
            a.iter()
                .zip(&self.row_target)
                .map(|(x, r)| x * r)
                .chain(b.iter().zip(&self.col_target).map(|(y, s)| y * s))
                .chain(p.iter().map(|v| -v)),
        )
    }
}

/// Dense Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor != 0.0 {
                let (upper, lower) = a.split_at_mut(row);
                for (t, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                    *t -= factor * p;
                }
                rhs[row] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail = compensated_sum((row + 1..n).map(|k| a[row][k] * x[k]));
        x[row] = (rhs[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Solves the same balanced max-score problem as
/// [`sinkhorn_maxcost`](super::sinkhorn_maxcost) to an L1 marginal residual of
/// [`ORACLE_TOLERANCE`]. Only for problems up to
/// [`ORACLE_CAP`] x [`ORACLE_CAP`].
pub fn oracle_entropic_ot(cost: &CostMatrix, xi: f64) -> Result<TransportPlan> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > ORACLE_CAP || n > ORACLE_CAP {
        return Err(Error::TooLarge {
            what: "the transport oracle",
            rows: m,
            cols: n,
            cap: ORACLE_CAP,
        });
    }
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::invalid(format!("xi must be > 0, got {xi}")));
    }
    let kernel_log = cost.values() / xi;
    let (row_target, col_target) = TransportPlan::balanced_targets(m, n);
    let dual = Dual {
        kernel_log: &kernel_log,
        row_target,
        col_target,
    };

    let mut a = vec![0.0; m];
    let mut b = vec![0.0; n];

    // Exact maximization in one coordinate at a time, rows then columns.
    let mut scratch = Vec::with_capacity(m.max(n));
    for _ in 0..WARM_SWEEPS {
        for i in 0..m {
            scratch.clear();
            scratch.extend((0..n).map(|j| kernel_log[[i, j]] + b[j]));
            a[i] = dual.row_target[i].ln() - log_sum_exp(&scratch);
        }
        for j in 0..n {
            scratch.clear();
            scratch.extend((0..m).map(|i| kernel_log[[i, j]] + a[i]));
            b[j] = dual.col_target[j].ln() - log_sum_exp(&scratch);
        }
    }

    // Newton on (a, b[..n-1]); b[n-1] is pinned because the dual is invariant
    // under a -> a + c, b -> b - c.
    let dim = m + n - 1;
    for _ in 0..MAX_NEWTON {
        let p = dual.plan(&a, &b);
        if dual.residual(&p) < ORACLE_TOLERANCE {
            break;
        }
        let rows = Dual::row_sums(&p);
        let cols = Dual::col_sums(&p);
        let mut grad = Vec::with_capacity(dim);
        grad.extend((0..m).map(|i| dual.row_target[i] - rows[i]));
        grad.extend((0..n - 1).map(|j| dual.col_target[j] - cols[j]));

        let mut hess = vec![vec![0.0; dim]; dim];
        for i in 0..m {
            hess[i][i] = rows[i];
            for j in 0..n - 1 {
                hess[i][m + j] = p[[i, j]];
                hess[m + j][i] = p[[i, j]];
            }
        }
        for j in 0..n - 1 {
            hess[m + j][m + j] = cols[j];
        }
        let Some(step) = solve_dense(hess, grad.clone()) else {
            break;
        };

        let base = dual.objective(&a, &b);
        let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        let mut t = 1.0;
        loop {
            let trial_a: Vec<f64> = (0..m).map(|i| a[i] + t * step[i]).collect();
            let trial_b: Vec<f64> = (0..n)
                .map(|j| if j + 1 < n { b[j] + t * step[m + j] } else { b[j] })
                .collect();
            let value = dual.objective(&trial_a, &trial_b);
            if value.is_finite() && value >= base + 1e-4 * t * slope - 1e-15 * base.abs() {
                a = trial_a;
                b = trial_b;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                break;
            }
        }
        if t < 1e-12 {
            break;
        }
    }

    let values = dual.plan(&a, &b);
    let residual = dual.residual(&values);
    if !(residual < ORACLE_TOLERANCE) {
        return Err(Error::NoConvergence(format!(
            "oracle stalled at L1 residual {residual:e}"
        )));
    }
    Ok(TransportPlan {
        values,
        row_target: dual.row_target,
        col_target: dual.col_target,
        log_u: Array1::from(a),
        log_v: Array1::from(b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn oracle(c: Array2<f64>, xi: f64) -> TransportPlan {
        oracle_entropic_ot(&CostMatrix::from_values(c).unwrap(), xi).unwrap()
    }

    #[test]
    fn single_cell() {
        let p = oracle(array![[4.0]], 0.5);
        assert!((p.values[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_cost_three_by_three() {
        let p = oracle(Array2::from_elem((3, 3), -2.0), 0.1);
        for v in &p.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    // Reference values computed with 50-digit arithmetic; for this symmetric
    // 2x2 case the plan is 1 / (1 + exp(-3 / (2 xi))) on the diagonal.
    #[test]
    fn two_by_two_fixtures() {
        let cases = [
            (1.0, 0.817_574_476_193_643_7, 0.182_425_523_806_356_3),
            (0.5, 0.952_574_126_822_433_2, 0.047_425_873_177_566_78),
        ];
        for (xi, hi, lo) in cases {
            let p = oracle(array![[2.0, 0.0], [0.0, 1.0]], xi);
            let want = array![[hi, lo], [lo, hi]];
            for (a, b) in p.values.iter().zip(&want) {
                assert!((a - b).abs() < 1e-14, "xi={xi}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tight_regularization_still_converges() {
        let c = array![
            [2.9, -3.0, 0.1, 1.5],
            [-2.2, 2.8, 0.0, -0.4],
            [1.1, 1.2, -2.9, 2.2],
            [0.0, -1.0, 2.5, -2.5]
        ];
        let p = oracle(c, 0.05);
        assert!(p.values.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn over_cap_rejected() {
        let c = CostMatrix::from_values(Array2::zeros((7, 2))).unwrap();
        assert!(matches!(oracle_entropic_ot(&c, 1.0), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn dense_solver() {
        let x = solve_dense(vec![vec![0.0, 2.0], vec![3.0, 1.0]], vec![4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }
}
