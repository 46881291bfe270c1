//! Selective Sinkhorn routing for sparse mixture-of-experts layers.
//!
//! Tokens are assigned to experts either by ordinary top-k softmax gating or,
//! with probability `p` per training step, by solving an entropy-regularized
//! max-score optimal transport problem whose column marginals force every
//! expert to receive the same load. The crate is organised bottom-up:
//!
//! - [`ot`]: cost matrices, Gaussian cost noise, the Sinkhorn-Knopp solver
//!   (naive and log-domain) and an independent Newton-based reference solver.
//! - [`routing`]: top-k selection, softmax routing, transport-plan routing and
//!   the selective branch switch, plus a brute-force KL oracle.
//! - [`moe`]: a small MoE block with MLP experts, a hand-written backward pass,
//!   baseline regularizers and a synthetic training task.
//! - [`analysis`]: selection probabilities under cost noise, load statistics
//!   and the router overhead benchmark.
//! - [`verify`]: the named property suite behind `ssr verify`.
//!
//! The guide in `book/` walks through each of these with runnable snippets.

pub mod analysis;
pub mod error;
pub mod io;
pub mod moe;
pub mod ot;
pub mod routing;
pub mod verify;

pub use error::{Error, Result};

/// Seedable generator used across the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's standard generator from a seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/moe.md")]
    mod moe {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
