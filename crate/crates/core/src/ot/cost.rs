use ndarray::{Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::routing::GatingScores;
use crate::{Error, Result};

/// How gating scores become transport costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Raw scores.
    Linear,
    /// Row-wise softmax of the scores; bounded in (0, 1).
    Softmax,
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostMode::Linear => "linear",
            CostMode::Softmax => "softmax",
        })
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CostMode::Linear),
            "softmax" => Ok(CostMode::Softmax),
            other => Err(Error::invalid(format!("unknown cost mode {other:?}"))),
        }
    }
}

/// The m x n matrix whose entries the transport plan maximizes against.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    mode: CostMode,
    noise_applied: bool,
    noise_scale: f64,
    noise_std: f64,
}

impl CostMatrix {
    /// Wraps an arbitrary finite matrix as a linear-mode cost.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        Self::with_mode(values, CostMode::Linear)
    }

    fn with_mode(values: Array2<f64>, mode: CostMode) -> Result<Self> {
        let (m, n) = values.dim();
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!("empty {m}x{n} cost matrix")));
        }
        check_finite(&values)?;
        Ok(Self {
            values,
            mode,
            noise_applied: false,
            noise_scale: 0.0,
            noise_std: 0.0,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    pub fn noise_applied(&self) -> bool {
        self.noise_applied
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    /// Adds `c` to every entry. Used to check shift invariance of the plan.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            values: &self.values + c,
            ..self.clone()
        }
    }
}

pub(crate) fn check_finite(values: &Array2<f64>) -> Result<()> {
    if let Some(((row, col), &value)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { row, col, value });
    }
    Ok(())
}

/// Max-subtracted softmax of `row`, written into `out`.
fn softmax_into(row: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(row) {
        *o = (s - max).exp();
        total += *o;
    }
    out.mapv_inplace(|v| v / total);
}

pub(crate) fn softmax_rows(values: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(values.raw_dim());
    for (row, out_row) in values.rows().into_iter().zip(out.rows_mut()) {
        softmax_into(row, out_row);
    }
    out
}

/// Turns gating scores into a transport cost.
pub fn build_cost(scores: &GatingScores, mode: CostMode) -> Result<CostMatrix> {
    let values = scores.values();
    if values.ncols() < 2 {
        return Err(Error::invalid("cost construction needs at least two experts"));
    }
    check_finite(values)?;
    let values = match mode {
        CostMode::Linear => values.clone(),
        CostMode::Softmax => softmax_rows(values),
    };
    CostMatrix::with_mode(values, mode)
}

/// Adds `alpha_noise * eps`, eps ~ N(0, sigma^2) i.i.d., to every entry of
/// `values` in row-major order.
pub(crate) fn add_gaussian<R: Rng + ?Sized>(
    values: &mut Array2<f64>,
    alpha_noise: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<()> {
    if !(alpha_noise >= 0.0) || !alpha_noise.is_finite() {
        return Err(Error::invalid(format!("alpha_noise must be >= 0, got {alpha_noise}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if alpha_noise == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for v in values.iter_mut() {
        *v += alpha_noise * normal.sample(rng);
    }
    Ok(())
}

/// Returns `cost + alpha_noise * eps` with eps ~ N(0, sigma^2) i.i.d.
pub fn inject_noise<R: Rng + ?Sized>(
    cost: &CostMatrix,
    alpha_noise: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<CostMatrix> {
    let mut values = cost.values.clone();
    add_gaussian(&mut values, alpha_noise, sigma, rng)?;
    Ok(CostMatrix {
        values,
        mode: cost.mode,
        noise_applied: true,
        noise_scale: alpha_noise,
        noise_std: sigma,
    })
}
