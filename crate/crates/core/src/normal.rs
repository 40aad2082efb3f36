//! Standard normal density and cumulative distribution.

use crate::scalar::Scalar;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf<T: Scalar>(x: T) -> T {
    if !x.is_finite() {
        return T::zero();
    }
    T::of(INV_SQRT_2PI) * (-(x * x) * T::of(0.5)).exp()
}

/// `Φ(x) = erfc(−x / √2) / 2`, evaluated in `f64`.
pub fn cdf<T: Scalar>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    T::of(0.5 * libm::erfc(-x.to_f64_lossy() * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Φ⁻¹(p)` for `0 < p < 1`, by safeguarded Newton iteration on [`cdf`].
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level {p} outside (0, 1)");
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let mut x = 0.0f64;
    for _ in 0..200 {
        let f = cdf(x) - p;
        if f.abs() <= 1e-16 * p.min(1.0 - p).max(1e-300) {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let step = f / pdf(x);
        let next = x - step;
        x = if step.is_finite() && next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}
