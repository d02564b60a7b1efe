//! Regularized distances D_β, the fields H_β, ∇D_β, the smoothed density s_X
//! and the (b, 𝒱) decomposition of H_α.
//!
//! Every field is a direct kernel sum over the support, plus the analytic
//! contribution of the completion rays when the set has them.

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, Ray};
use crate::quad::tanh_sinh;
use serde::Serialize;
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;

fn gamma_half_integer(k: usize) -> f64 {
    // Γ(k/2) for k >= 1
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while x < k as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

thread_local! {
    static CB_CACHE: RefCell<HashMap<(usize, u64), f64>> = RefCell::new(HashMap::new());
}

/// c_β = ∫_{ℝ^d} (1 + |y|²)^{-(d+β)/2} dy.
pub fn c_beta(d: usize, beta: f64) -> Result<f64> {
    if d == 0 || !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!(
            "c_beta needs d >= 1 and beta > 0, got d={d}, beta={beta}"
        )));
    }
    if let Some(v) = CB_CACHE.with(|c| c.borrow().get(&(d, beta.to_bits())).copied()) {
        return Ok(v);
    }
    // radial reduction, then t = ρ²/(1+ρ²) gives a beta integral
    let sphere = 2.0 * PI.powf(d as f64 / 2.0) / gamma_half_integer(d);
    let integral = statrs::function::beta::beta(d as f64 / 2.0, beta / 2.0);
    let v = 0.5 * sphere * integral;
    CB_CACHE.with(|c| c.borrow_mut().insert((d, beta.to_bits()), v));
    Ok(v)
}

/// r2^{-e/2}, with fast paths for integer and half-integer e.
#[derive(Clone, Copy)]
pub(crate) enum Power {
    Even(i32),
    Odd(i32),
    Half(i32),
    General(f64),
}

impl Power {
    pub(crate) fn new(e: f64) -> Self {
        let twice = 2.0 * e;
        if (e - e.round()).abs() < 1e-14 {
            let k = e.round() as i32;
            if k % 2 == 0 {
                Power::Even(k / 2)
            } else {
                Power::Odd(k)
            }
        } else if (twice - twice.round()).abs() < 1e-14 {
            Power::Half(e.floor() as i32)
        } else {
            Power::General(e)
        }
    }

    #[inline]
    pub(crate) fn eval(self, r2: f64) -> f64 {
        match self {
            Power::Even(h) => r2.powi(-h),
            Power::Odd(k) => r2.powi(-(k + 1) / 2) * r2.sqrt(),
            Power::Half(k) => {
                let r = r2.sqrt();
                r.powi(-k) / r.sqrt()
            }
            Power::General(e) => r2.powf(-0.5 * e),
        }
    }
}

/// ∫_a^∞ (1 + y²)^{-e/2} dy for e > 1.
fn tail_integral(e: f64, a: f64) -> Result<f64> {
    if a >= 2.0 {
        // binomial series in 1/a²
        let inv2 = 1.0 / (a * a);
        let mut coeff = 1.0;
        let mut pw = a.powf(1.0 - e);
        let mut sum = 0.0;
        for k in 0..200 {
            let term = coeff * pw / (e + 2.0 * k as f64 - 1.0);
            sum += term;
            if term.abs() <= 1e-17 * sum.abs() {
                return Ok(sum);
            }
            coeff *= (-0.5 * e - k as f64) / (k as f64 + 1.0);
            pw *= inv2;
        }
        return Ok(sum);
    }
    // y = cot φ turns the integral into ∫_0^{φmax} sin^{e-2} φ dφ
    let phi = 1f64.atan2(a);
    if (e - e.round()).abs() < 1e-14 && e.round() >= 2.0 {
        let m = e.round() as i32 - 2;
        let (s, c) = phi.sin_cos();
        let mut lo = phi; // I_0
        let mut hi = 2.0 * (0.5 * phi).sin().powi(2); // I_1
        if m == 0 {
            return Ok(lo);
        }
        for j in 2..=m {
            let next = -s.powi(j - 1) * c / j as f64 + (j - 1) as f64 / j as f64 * lo;
            lo = hi;
            hi = next;
        }
        return Ok(hi);
    }
    tanh_sinh(|_, da, _| da.sin().powf(e - 2.0), 0.0, phi, 1e-13)
}

/// Kernel sums of one ray: (∫ |X-γ|^{-e} ds, ∫ |X-γ|^{-e-1} (X-γ) ds) times the density.
pub(crate) fn ray_sums(ray: &Ray, x: &[f64], e: f64, want_vec: bool, vec_out: &mut [f64]) -> Result<f64> {
    let n = x.len();
    let v: Vec<f64> = (0..n).map(|a| x[a] - ray.start[a]).collect();
    let t0: f64 = (0..n).map(|a| v[a] * ray.dir[a]).sum();
    let w: Vec<f64> = (0..n).map(|a| v[a] - t0 * ray.dir[a]).collect();
    let u0 = w.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist_start = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rho = ray.density;
    let scalar;
    if u0 <= 1e-13 * dist_start {
        if t0 >= 0.0 {
            return Err(Error::Resolution("evaluation point lies on the completion ray".into()));
        }
        scalar = rho * dist_start.powf(1.0 - e) / (e - 1.0);
    } else {
        scalar = rho * u0.powf(1.0 - e) * tail_integral(e, -t0 / u0)?;
    }
    if want_vec {
        // vector field uses exponent e+1 on the perpendicular part
        let axial = -rho * dist_start.powf(1.0 - e) / (e - 1.0);
        let perp = if u0 <= 1e-13 * dist_start {
            0.0
        } else {
            rho * u0.powf(1.0 - e) * tail_integral(e + 1.0, -t0 / u0)?
        };
        for a in 0..n {
            let unit_perp = if u0 > 0.0 { w[a] / u0 } else { 0.0 };
            vec_out[a] += perp * unit_perp + axial * ray.dir[a];
        }
    }
    Ok(scalar)
}

/// Evaluator of the kernel sums S_e(X) = Σ w |X-p|^{-e} and V_e(X) = Σ w |X-p|^{-e-1} (X-p).
#[derive(Clone, Copy)]
pub struct Kernel<'a> {
    pub sigma: &'a DiscreteMeasure,
    /// Minimum admissible dist(X, Γ) in units of the spacing.
    pub guard: f64,
}

impl<'a> Kernel<'a> {
    pub fn new(sigma: &'a DiscreteMeasure) -> Self {
        Kernel { sigma, guard: 2.0 }
    }

    pub fn check(&self, x: &[f64]) -> Result<f64> {
        let dist = self.sigma.dist_to_gamma(x);
        if dist < self.guard * self.sigma.spacing {
            return Err(Error::Resolution(format!(
                "point at distance {dist:e} from the set, below {} spacings",
                self.guard
            )));
        }
        Ok(dist)
    }

    /// Returns S_e and, if requested, V_e; no resolution guard.
    pub fn sums(&self, x: &[f64], e: f64, want_vec: bool) -> Result<(f64, Vec<f64>)> {
        let s = self.sigma;
        let n = s.ambient_dim;
        let pw = Power::new(e);
        let pw1 = Power::new(e + 1.0);
        let mut scalar = 0.0;
        let mut vec = vec![0.0; n];
        let mut diff = [0.0f64; 8];
        for i in 0..s.len() {
            let p = s.point(i);
            let mut r2 = 0.0;
            for a in 0..n {
                diff[a] = x[a] - p[a];
                r2 += diff[a] * diff[a];
            }
            let w = s.weights[i];
            scalar += w * pw.eval(r2);
            if want_vec {
                let f = w * pw1.eval(r2);
                for a in 0..n {
                    vec[a] += f * diff[a];
                }
            }
        }
        for ray in &s.completion {
            scalar += ray_sums(ray, x, e, want_vec, &mut vec)?;
        }
        Ok((scalar, vec))
    }

    pub fn d_beta(&self, x: &[f64], beta: f64) -> Result<f64> {
        self.check(x)?;
        let (sum, _) = self.sums(x, self.sigma.intrinsic_dim as f64 + beta, false)?;
        Ok(sum.powf(-1.0 / beta))
    }

    pub fn h_beta(&self, x: &[f64], beta: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.sums(x, self.sigma.intrinsic_dim as f64 + beta, true)?.1)
    }

    /// ∇D_β = ((d+β)/β) D_β^{β+1} H_{β+1}.
    pub fn grad_d_beta(&self, x: &[f64], beta: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        let d = self.sigma.intrinsic_dim as f64;
        let (s, _) = self.sums(x, d + beta, false)?;
        let (_, h1) = self.sums(x, d + beta + 1.0, true)?;
        let dval = s.powf(-1.0 / beta);
        let f = (d + beta) / beta * dval.powf(beta + 1.0);
        Ok(h1.iter().map(|h| f * h).collect())
    }

    /// s_X = c₁ c_{1/2}^{-2} D₁ / D_{1/2}.
    pub fn s_x(&self, x: &[f64]) -> Result<f64> {
        let d = self.sigma.intrinsic_dim;
        let k = c_beta(d, 1.0)? / c_beta(d, 0.5)?.powi(2);
        Ok(k * self.d_beta(x, 1.0)? / self.d_beta(x, 0.5)?)
    }

    pub fn bv_fields(&self, x: &[f64], alpha: f64, beta: f64) -> Result<BVPair> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Parameter("alpha and beta must be positive".into()));
        }
        let d = self.sigma.intrinsic_dim;
        let df = d as f64;
        let sx = self.s_x(x)?;
        let b = beta * c_beta(d, alpha + 1.0)? / ((df + beta) * c_beta(d, beta + 2.0)?)
            * (c_beta(d, beta)? * sx).powf((beta + 1.0 - alpha) / beta);
        let db = self.d_beta(x, beta)?;
        let grad = self.grad_d_beta(x, beta)?;
        let h_alpha = self.h_beta(x, alpha)?;
        let scale = db.powf(alpha);
        let v: Vec<f64> = (0..x.len()).map(|a| scale * h_alpha[a] - b * grad[a]).collect();
        Ok(BVPair {
            b,
            v,
            alpha,
            beta,
            s_x: sx,
            d_beta: db,
            grad_d_beta: grad,
            h_alpha,
        })
    }

    /// dist(X, Γ) · |∇(D_β / D_α)|.
    pub fn ratio_gradient(&self, x: &[f64], alpha: f64, beta: f64) -> Result<f64> {
        let dist = self.check(x)?;
        if alpha == beta {
            return Ok(0.0);
        }
        let d = self.sigma.intrinsic_dim as f64;
        let (sb, _) = self.sums(x, d + beta, false)?;
        let (sa, _) = self.sums(x, d + alpha, false)?;
        let (_, hb1) = self.sums(x, d + beta + 1.0, true)?;
        let (_, ha1) = self.sums(x, d + alpha + 1.0, true)?;
        let (db, da) = (sb.powf(-1.0 / beta), sa.powf(-1.0 / alpha));
        let fb = (d + beta) / beta * db.powf(beta);
        let fa = (d + alpha) / alpha * da.powf(alpha);
        let norm = (0..x.len())
            .map(|k| {
                let g = fb * hb1[k] - fa * ha1[k];
                g * g
            })
            .sum::<f64>()
            .sqrt();
        Ok(dist * db / da * norm)
    }

    pub fn sample(&self, x: &[f64], beta: f64) -> Result<FieldSample> {
        let dist = self.check(x)?;
        Ok(FieldSample {
            x: x.to_vec(),
            beta,
            d_beta: self.d_beta(x, beta)?,
            h_beta: self.h_beta(x, beta)?,
            grad_d_beta: self.grad_d_beta(x, beta)?,
            guard: dist / self.sigma.spacing,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldSample {
    pub x: Vec<f64>,
    pub beta: f64,
    pub d_beta: f64,
    pub h_beta: Vec<f64>,
    pub grad_d_beta: Vec<f64>,
    /// dist(X, Γ) / spacing.
    pub guard: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BVPair {
    pub b: f64,
    pub v: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub s_x: f64,
    pub d_beta: f64,
    pub grad_d_beta: Vec<f64>,
    pub h_alpha: Vec<f64>,
}

/// Range of b implied by s_X ∈ [s_lo, s_hi].
pub fn b_range(d: usize, alpha: f64, beta: f64, s_lo: f64, s_hi: f64) -> Result<(f64, f64)> {
    let k = beta * c_beta(d, alpha + 1.0)? / ((d as f64 + beta) * c_beta(d, beta + 2.0)?);
    let cb = c_beta(d, beta)?;
    let ex = (beta + 1.0 - alpha) / beta;
    let (a, b) = (k * (cb * s_lo).powf(ex), k * (cb * s_hi).powf(ex));
    Ok((a.min(b), a.max(b)))
}

pub fn d_beta(sigma: &DiscreteMeasure, x: &[f64], beta: f64) -> Result<f64> {
    Kernel::new(sigma).d_beta(x, beta)
}

pub fn h_beta(sigma: &DiscreteMeasure, x: &[f64], beta: f64) -> Result<Vec<f64>> {
    Kernel::new(sigma).h_beta(x, beta)
}

pub fn grad_d_beta(sigma: &DiscreteMeasure, x: &[f64], beta: f64) -> Result<Vec<f64>> {
    Kernel::new(sigma).grad_d_beta(x, beta)
}

pub fn s_x(sigma: &DiscreteMeasure, x: &[f64]) -> Result<f64> {
    Kernel::new(sigma).s_x(x)
}

pub fn bv_fields(sigma: &DiscreteMeasure, x: &[f64], alpha: f64, beta: f64) -> Result<BVPair> {
    Kernel::new(sigma).bv_fields(x, alpha, beta)
}

pub fn ratio_gradient(sigma: &DiscreteMeasure, x: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    Kernel::new(sigma).ratio_gradient(x, alpha, beta)
}

/// Closed forms on the unit-density d-plane at distance t.
pub mod plane {
    use super::c_beta;
    use crate::error::Result;

    pub fn d_beta(d: usize, beta: f64, t: f64) -> Result<f64> {
        Ok(c_beta(d, beta)?.powf(-1.0 / beta) * t)
    }

    /// |H_β| (the field points along the unit normal toward X).
    pub fn h_beta(d: usize, beta: f64, t: f64) -> Result<f64> {
        Ok(c_beta(d, beta + 1.0)? * t.powf(-beta))
    }

    /// |∇D_β|.
    pub fn grad_d_beta(d: usize, beta: f64) -> Result<f64> {
        Ok(c_beta(d, beta)?.powf(-1.0 / beta))
    }
}

/// Central finite-difference gradient of a scalar field with a Richardson check.
pub fn fd_gradient<F>(f: F, x: &[f64], step: f64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let central = |h: f64| -> Result<Vec<f64>> {
        let mut g = vec![0.0; n];
        let mut y = x.to_vec();
        for a in 0..n {
            y[a] = x[a] + h;
            let fp = f(&y)?;
            y[a] = x[a] - h;
            let fm = f(&y)?;
            y[a] = x[a];
            g[a] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    };
    let g1 = central(step)?;
    let g2 = central(0.5 * step)?;
    // Richardson extrapolation; the difference estimates the truncation error
    let g: Vec<f64> = (0..n).map(|a| (4.0 * g2[a] - g1[a]) / 3.0).collect();
    let err = (0..n).map(|a| (g[a] - g2[a]).abs()).fold(0.0, f64::max);
    Ok((g, err))
}

/// Central-difference divergence of a vector field.
pub fn fd_divergence<F>(f: F, x: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut y = x.to_vec();
    let mut div = 0.0;
    for a in 0..x.len() {
        y[a] = x[a] + step;
        let fp = f(&y)?[a];
        y[a] = x[a] - step;
        let fm = f(&y)?[a];
        y[a] = x[a];
        div += (fp - fm) / (2.0 * step);
    }
    Ok(div)
}
