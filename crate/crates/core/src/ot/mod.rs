//! Entropy-regularized max-score optimal transport between tokens and experts.

mod cost;
mod oracle;
mod sinkhorn;

pub(crate) use cost::{add_gaussian, check_finite, softmax_rows};
pub use cost::{build_cost, inject_noise, CostMatrix, CostMode};
pub use oracle::{oracle_entropic_ot, ORACLE_CAP, ORACLE_TOLERANCE};
pub use sinkhorn::{
    marginal_residuals, sinkhorn_maxcost, SinkhornDiagnostics, SinkhornParams, TransportPlan, DIVISION_GUARD,
};
