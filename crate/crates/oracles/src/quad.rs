//! Quadrature-based distribution functions.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Two-sided Student-t p-value with `nu` degrees of freedom.
///
/// With `x = sqrt(nu) tan(theta)` the density becomes proportional to
/// `cos(theta)^(nu - 1)` on `(-pi/2, pi/2)`, so both the tail mass and the
/// normalizer are smooth finite integrals.
pub fn t_two_sided_p(t: f64, nu: f64) -> f64 {
    let theta_t = (t.abs() / nu.sqrt()).atan();
    let g = |th: f64| th.cos().powf(nu - 1.0);
    let half = std::f64::consts::FRAC_PI_2;
    let total = simpson(g, 0.0, half, 200_000);
    let tail = simpson(g, theta_t, half, 200_000);
    tail / total
}

/// CDF of the range of `k` independent standard normals.
pub fn normal_range_cdf(w: f64, k: usize) -> f64 {
    let n = Normal::standard();
    let f = |x: f64| n.pdf(x) * (n.cdf(x + w) - n.cdf(x)).powi(k as i32 - 1);
    k as f64 * simpson(f, -12.0, 12.0, 20_000)
}

/// Nemenyi critical value: the upper-`alpha` quantile of the normal range
/// divided by sqrt 2, by bisection.
pub fn nemenyi_q(k: usize, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if normal_range_cdf(mid, k) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / std::f64::consts::SQRT_2
}
