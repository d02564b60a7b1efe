//! Double-exponential (tanh-sinh) quadrature on a finite interval.
//!
//! The integrand receives the node together with its distances to both
//! endpoints, computed without cancellation, so algebraic endpoint
//! singularities such as `t^{-1/2}` are integrated to full precision.

use crate::error::{Error, Result};
use std::f64::consts::FRAC_PI_2;

const MAX_LEVEL: usize = 12;
const T_MAX: f64 = 4.0;

/// Integrates `f(x, x - a, b - x)` over `[a, b]` to relative tolerance `tol`.
pub fn tanh_sinh<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64, f64, f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return tanh_sinh(f, b, a, tol).map(|v| -v);
    }
    let half = 0.5 * (b - a);
    // contribution of the node at parameter t (and its mirror -t)
    let eval = |t: f64| -> f64 {
        let u = FRAC_PI_2 * t.sinh();
        let cu = u.cosh();
        let w = FRAC_PI_2 * t.cosh() / (cu * cu);
        // 1 - tanh(u) and 1 + tanh(u) without cancellation
        let e = (-2.0 * u.abs()).exp();
        let small = 2.0 * e / (1.0 + e);
        let big = 2.0 - small;
        let (one_minus, one_plus) = if u >= 0.0 { (small, big) } else { (big, small) };
        let da = half * one_plus;
        let db = half * one_minus;
        if da <= 0.0 || db <= 0.0 || w == 0.0 {
            return 0.0;
        }
        let x = if da < db { a + da } else { b - db };
        w * f(x, da, db)
    };

    let mut h = 1.0;
    let mut sum = eval(0.0);
    let mut k = 1;
    while k as f64 * h <= T_MAX {
        let t = k as f64 * h;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut prev = half * h * sum;
    for level in 1..=MAX_LEVEL {
        h *= 0.5;
        // only odd multiples are new at this level
        let mut k = 1;
        while k as f64 * h <= T_MAX {
            let t = k as f64 * h;
            sum += eval(t) + eval(-t);
            k += 2;
        }
        let cur = half * h * sum;
        if !cur.is_finite() {
            return Err(Error::Numeric {
                message: "non-finite quadrature sum".into(),
                residual: f64::INFINITY,
            });
        }
        let diff = (cur - prev).abs();
        if level >= 3 && diff <= tol * cur.abs().max(f64::MIN_POSITIVE) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Numeric {
        message: "tanh-sinh quadrature did not converge".into(),
        residual: prev.abs(),
    })
}
