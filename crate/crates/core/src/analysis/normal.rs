/// Standard normal CDF, `Phi(z) = erfc(-z / sqrt 2) / 2`.
///
/// Going through the complementary error function keeps full relative
/// precision in the lower tail, where `1 + erf` would cancel.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}
