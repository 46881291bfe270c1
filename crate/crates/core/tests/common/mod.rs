#![allow(dead_code)]

/// Relative tolerance for analytic vs central-difference gradients.
pub const FD_REL_TOL: f64 = 1e-4;

/// Entries below this magnitude are compared absolutely: central differences
/// with step 1e-5 carry ~1e-11 rounding noise, which would swamp a relative
/// comparison near zero.
pub const FD_FLOOR: f64 = 1e-6;

pub fn gradient_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn max_rel_err<'a>(analytic: impl Iterator<Item = &'a [f64]>, numeric: impl Iterator<Item = &'a [f64]>) -> f64 {
    analytic
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.len(), n.len());
            a.iter()
                .zip(n)
                .map(|(&a, &n)| gradient_rel_err(a, n))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
