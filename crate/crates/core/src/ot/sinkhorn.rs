use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Zip};
use serde::{Serialize, Serializer};

use super::CostMatrix;
use crate::{Error, Result};

/// Denominators below this in the naive solver count as overflow.
pub const DIVISION_GUARD: f64 = 1e-300;

/// Solver settings for [`sinkhorn_maxcost`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Entropic regularization strength.
    pub xi: f64,
    /// Stopping tolerance on both L1 marginal residuals.
    pub delta: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Run every update in the log domain.
    pub stabilized: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            xi: 0.5,
            delta: 1e-4,
            max_iter: 100,
            stabilized: true,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::invalid(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("eta must be >= 1"));
        }
        Ok(())
    }
}

/// Positive m x n plan with row sums 1 and column sums m/n, stored together
/// with its log-domain scalings so that
/// `values[i][j] = exp(log_u[i] + cost[i][j] / xi + log_v[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub row_target: Array1<f64>,
    pub col_target: Array1<f64>,
    pub log_u: Array1<f64>,
    pub log_v: Array1<f64>,
}

impl TransportPlan {
    /// Unit row marginals and m/n column marginals for an m x n problem.
    pub fn balanced_targets(m: usize, n: usize) -> (Array1<f64>, Array1<f64>) {
        (Array1::ones(m), Array1::from_elem(n, m as f64 / n as f64))
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Rebuilds the plan from the stored scalings and the kernel exp(C/xi).
    pub fn reconstruct(&self, cost: &CostMatrix, xi: f64) -> Array2<f64> {
        let mut out = cost.values() / xi;
        for ((i, j), v) in out.indexed_iter_mut() {
            *v = (self.log_u[i] + *v + self.log_v[j]).exp();
        }
        out
    }
}

/// Solver bookkeeping, returned alongside every plan and carried by
/// [`Error::Overflow`] when the naive solver breaks down.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SinkhornDiagnostics {
    pub iterations_used: usize,
    /// max(row, col) residual after the first iteration.
    pub first_residual: f64,
    pub final_row_residual: f64,
    pub final_col_residual: f64,
    pub converged: bool,
    pub overflow: bool,
    #[serde(rename = "wall_time_ms", serialize_with = "millis")]
    pub wall_time: Duration,
}

fn millis<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e3)
}

/// L1 violations of the row and column targets:
/// `(|P 1 - r|_1, |P^T 1 - s|_1)`.
pub fn marginal_residuals(plan: &TransportPlan) -> (f64, f64) {
    let rows = plan.values.sum_axis(ndarray::Axis(1));
    let cols = plan.values.sum_axis(ndarray::Axis(0));
    let row = Zip::from(&rows)
        .and(&plan.row_target)
        .fold(0.0, |acc, a, b| acc + (a - b).abs());
    let col = Zip::from(&cols)
        .and(&plan.col_target)
        .fold(0.0, |acc, a, b| acc + (a - b).abs());
    (row, col)
}

/// Solves `max <P, C> - xi <P, log P>` subject to `P > 0`, `P 1 = 1`,
/// `P^T 1 = (m/n) 1` by alternating column and row scaling of K = exp(C/xi).
///
/// With `stabilized` the scalings live in the log domain and every reduction is
/// a log-sum-exp, so no intermediate can overflow. Without it the kernel is
/// formed explicitly; a non-finite kernel entry, a zero kernel entry, or a
/// scaling denominator below [`DIVISION_GUARD`] aborts with
/// [`Error::Overflow`].
pub fn sinkhorn_maxcost(cost: &CostMatrix, params: &SinkhornParams) -> Result<(TransportPlan, SinkhornDiagnostics)> {
    params.validate()?;
    let start = Instant::now();
    let (m, n) = (cost.rows(), cost.cols());
    let (row_target, col_target) = TransportPlan::balanced_targets(m, n);
    let scaled = cost.values() / params.xi;

    let outcome = if params.stabilized {
        Ok(log_domain(&scaled, &row_target, &col_target, params))
    } else {
        naive(&scaled, &row_target, &col_target, params)
    };

    match outcome {
        Ok(run) => {
            let mut values = scaled;
            for ((i, j), v) in values.indexed_iter_mut() {
                *v = (run.log_u[i] + *v + run.log_v[j]).exp();
            }
            let plan = TransportPlan {
                values,
                row_target,
                col_target,
                log_u: run.log_u,
                log_v: run.log_v,
            };
            let (row_res, col_res) = marginal_residuals(&plan);
            let diagnostics = SinkhornDiagnostics {
                iterations_used: run.iterations,
                first_residual: run.first_residual,
                final_row_residual: row_res,
                final_col_residual: col_res,
                converged: row_res < params.delta && col_res < params.delta,
                overflow: false,
                wall_time: start.elapsed(),
            };
            Ok((plan, diagnostics))
        }
        Err(iterations) => Err(Error::Overflow(Box::new(SinkhornDiagnostics {
            iterations_used: iterations,
            first_residual: f64::NAN,
            final_row_residual: f64::NAN,
            final_col_residual: f64::NAN,
            converged: false,
            overflow: true,
            wall_time: start.elapsed(),
        }))),
    }
}

struct Run {
    log_u: Array1<f64>,
    log_v: Array1<f64>,
    iterations: usize,
    first_residual: f64,
}

fn l1_gap(actual: &Array1<f64>, target: &Array1<f64>) -> f64 {
    Zip::from(actual).and(target).fold(0.0, |acc, a, b| acc + (a - b).abs())
}

/// Log-sum-exp over each column of `scaled + f[:, None]`.
fn column_lse(scaled: &Array2<f64>, f: &Array1<f64>) -> Array1<f64> {
    let n = scaled.ncols();
    let mut max = Array1::from_elem(n, f64::NEG_INFINITY);
    for (row, &fi) in scaled.rows().into_iter().zip(f) {
        Zip::from(&mut max).and(row).for_each(|mx, &c| *mx = mx.max(c + fi));
    }
    let mut acc = Array1::<f64>::zeros(n);
    for (row, &fi) in scaled.rows().into_iter().zip(f) {
        Zip::from(&mut acc)
            .and(row)
            .and(&max)
            .for_each(|a, &c, &mx| *a += (c + fi - mx).exp());
    }
    Zip::from(&mut acc).and(&max).for_each(|a, &mx| *a = mx + a.ln());
    acc
}

/// Log-sum-exp over each row of `scaled + g[None, :]`.
fn row_lse(scaled: &Array2<f64>, g: &Array1<f64>) -> Array1<f64> {
    scaled
        .rows()
        .into_iter()
        .map(|row| {
            let mx = Zip::from(row)
                .and(g)
                .fold(f64::NEG_INFINITY, |m, &c, &gj| m.max(c + gj));
            let s = Zip::from(row)
                .and(g)
                .fold(0.0, |acc, &c, &gj| acc + (c + gj - mx).exp());
            mx + s.ln()
        })
        .collect()
}

fn log_domain(
    scaled: &Array2<f64>,
    row_target: &Array1<f64>,
    col_target: &Array1<f64>,
    params: &SinkhornParams,
) -> Run {
    let (m, n) = scaled.dim();
    let log_r = row_target.mapv(f64::ln);
    let log_s = col_target.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(n);
    let mut col_lse = column_lse(scaled, &f);
    let mut first_residual = f64::NAN;
    let mut iterations = 0;

    for t in 1..=params.max_iter {
        iterations = t;
        g = &log_s - &col_lse;
        let r_lse = row_lse(scaled, &g);
        f = &log_r - &r_lse;
        col_lse = column_lse(scaled, &f);

        let row_sums = (&f + &r_lse).mapv(f64::exp);
        let col_sums = (&g + &col_lse).mapv(f64::exp);
        let row_res = l1_gap(&row_sums, row_target);
        let col_res = l1_gap(&col_sums, col_target);
        if t == 1 {
            first_residual = row_res.max(col_res);
        }
        if row_res < params.delta && col_res < params.delta {
            break;
        }
    }
    Run {
        log_u: f,
        log_v: g,
        iterations,
        first_residual,
    }
}

/// Plain multiplicative updates. `Err` carries the iteration at which the
/// arithmetic broke down (0 for a bad kernel).
fn naive(
    scaled: &Array2<f64>,
    row_target: &Array1<f64>,
    col_target: &Array1<f64>,
    params: &SinkhornParams,
) -> std::result::Result<Run, usize> {
    let kernel = scaled.mapv(f64::exp);
    if kernel.iter().any(|k| !k.is_finite() || *k == 0.0) {
        return Err(0);
    }
    let guarded = |d: &Array1<f64>| d.iter().all(|x| x.is_finite() && *x >= DIVISION_GUARD);

    let mut u = Array1::<f64>::ones(scaled.nrows());
    let mut v = Array1::<f64>::ones(scaled.ncols());
    let mut ktu = kernel.t().dot(&u);
    let mut first_residual = f64::NAN;
    let mut iterations = 0;

    for t in 1..=params.max_iter {
        iterations = t;
        if !guarded(&ktu) {
            return Err(t);
        }
        v = col_target / &ktu;
        let kv = kernel.dot(&v);
        if !guarded(&kv) {
            return Err(t);
        }
        u = row_target / &kv;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(t);
        }
        ktu = kernel.t().dot(&u);

        let row_res = l1_gap(&(&u * &kv), row_target);
        let col_res = l1_gap(&(&v * &ktu), col_target);
        if !(row_res.is_finite() && col_res.is_finite()) {
            return Err(t);
        }
        if t == 1 {
            first_residual = row_res.max(col_res);
        }
        if row_res < params.delta && col_res < params.delta {
            break;
        }
    }
    Ok(Run {
        log_u: u.mapv(f64::ln),
        log_v: v.mapv(f64::ln),
        iterations,
        first_residual,
    })
}
