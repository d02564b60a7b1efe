//! Self-tests of the distance identities on a given set: probe sampling and a
//! pass/fail table with the worst residual per identity.

use crate::distances::{c_beta, fd_divergence, fd_gradient, plane, Kernel};
use crate::error::{Error, Result};
use crate::geometry::DiscreteMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub probes: usize,
    /// Probes keep at least this many spacings from Γ.
    pub min_dist: f64,
    /// Largest probe distance as a fraction of the extent.
    pub max_dist: f64,
    pub beta: f64,
    /// Second exponent for the ratio gradient and the (b, 𝒱) split.
    pub alpha: f64,
    /// Finite-difference step as a fraction of dist(X, Γ).
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            probes: 100,
            min_dist: 10.0,
            max_dist: 0.2,
            beta: 1.0,
            alpha: 2.0,
            fd_step: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityRow {
    pub identity: String,
    pub checks: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityRow {
    fn new(identity: &str, residuals: &[f64], tolerance: f64) -> Self {
        let max_residual = residuals.iter().fold(0.0f64, |m, r| m.max(*r));
        IdentityRow {
            identity: identity.to_string(),
            checks: residuals.len(),
            max_residual,
            tolerance,
            pass: !residuals.is_empty() && residuals.iter().all(|r| r.is_finite()) && max_residual <= tolerance,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Points off Γ: a support point inside the window plus a random offset, with
/// dist(X, Γ) between `min_dist` spacings and `max_dist` · extent.
pub fn sample_probes(sigma: &DiscreteMeasure, cfg: &VerifyConfig) -> Result<Vec<Vec<f64>>> {
    let n = sigma.ambient_dim;
    let lo = cfg.min_dist * sigma.spacing;
    let hi = cfg.max_dist * sigma.extent;
    if !(hi > lo) {
        return Err(Error::Parameter(format!(
            "probe distance range [{lo:e}, {hi:e}] is empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.probes);
    let mut attempts = 0;
    while out.len() < cfg.probes {
        attempts += 1;
        if attempts > 1000 * cfg.probes.max(1) {
            return Err(Error::Degenerate(format!("only {} admissible probes found", out.len())));
        }
        let t = lo * (hi / lo).powf(rng.gen::<f64>());
        let p = sigma.point(rng.gen_range(0..sigma.len()));
        if !sigma.is_interior(p, 4.0 * t) {
            continue;
        }
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = norm(&dir);
        if !(len > 1e-3) {
            continue;
        }
        let x: Vec<f64> = (0..n).map(|a| p[a] + t * dir[a] / len).collect();
        let dist = sigma.dist_to_gamma(&x);
        if dist >= lo && dist <= hi {
            out.push(x);
        }
    }
    Ok(out)
}

/// c_β(1, 1) = π and (β+d) c_{β+2} = β c_β on a 6-point grid.
pub fn constant_rows() -> Result<Vec<IdentityRow>> {
    let pi = (c_beta(1, 1.0)? - PI).abs() / PI;
    let mut rec = Vec::new();
    for d in [1usize, 2] {
        for b in [0.5, 1.0, 2.0] {
            let lhs = (b + d as f64) * c_beta(d, b + 2.0)?;
            let rhs = b * c_beta(d, b)?;
            rec.push((lhs - rhs).abs() / rhs);
        }
    }
    Ok(vec![
        IdentityRow::new("c_beta(1,1) = pi", &[pi], 1e-8),
        IdentityRow::new("c_beta recursion", &rec, 1e-8),
    ])
}

/// Identity table on `sigma`; `flat` adds the closed forms of a unit-density coordinate plane.
pub fn verify_identities(sigma: &DiscreteMeasure, cfg: &VerifyConfig, flat: bool) -> Result<Vec<IdentityRow>> {
    let probes = sample_probes(sigma, cfg)?;
    let k = Kernel::new(sigma);
    let (n, d) = (sigma.ambient_dim, sigma.intrinsic_dim);
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    let mut grad = Vec::new();
    let mut split = Vec::new();
    let mut hbound = Vec::new();
    let mut div = Vec::new();
    let (mut pd, mut ph, mut ps, mut pr, mut pv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for x in &probes {
        let dist = sigma.dist_to_gamma(x);
        let id = k.grad_d_beta(x, beta)?;
        let (fd, _) = fd_gradient(|y| k.d_beta(y, beta), x, cfg.fd_step * dist)?;
        grad.push(norm(&id.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>()) / norm(&id));
        let bv = k.bv_fields(x, alpha, beta)?;
        let hn = norm(&bv.h_alpha);
        let lhs: Vec<f64> = (0..n)
            .map(|a| bv.d_beta.powf(-alpha) * (bv.b * bv.grad_d_beta[a] + bv.v[a]) - bv.h_alpha[a])
            .collect();
        split.push(norm(&lhs) / hn);
        let h = k.h_beta(x, beta)?;
        hbound.push((norm(&h) * bv.d_beta.powf(beta) - 1.0).max(0.0));
        let e = (n - d - 1) as f64;
        if e > 0.0 {
            let dv = fd_divergence(|y| k.h_beta(y, e), x, cfg.fd_step * dist)?;
            div.push(dv.abs() * dist / norm(&k.h_beta(x, e)?));
        }
        if flat {
            let t = x[d..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let expect = plane::d_beta(d, beta, t)?;
            pd.push((bv.d_beta - expect).abs() / expect);
            let hm = plane::h_beta(d, beta, t)?;
            let off: Vec<f64> = (0..n)
                .map(|a| if a < d { h[a] } else { h[a] - hm * x[a] / t })
                .collect();
            ph.push(norm(&off) / hm);
            ps.push((bv.s_x - 1.0).abs());
            pr.push(k.ratio_gradient(x, alpha, beta)?);
            pv.push(norm(&bv.v) / (bv.b * norm(&bv.grad_d_beta)));
        }
    }
    let mut rows = constant_rows()?;
    rows.push(IdentityRow::new("grad D_beta vs finite differences", &grad, 1e-4));
    rows.push(IdentityRow::new(
        "H_alpha = (b grad D_beta + V) D_beta^-alpha",
        &split,
        1e-12,
    ));
    rows.push(IdentityRow::new("|H_beta| <= D_beta^-beta", &hbound, 1e-12));
    if !div.is_empty() {
        rows.push(IdentityRow::new("div H_(n-d-1) = 0", &div, 1e-3));
    }
    if flat {
        rows.push(IdentityRow::new("plane D_beta = c_beta^(-1/beta) dist", &pd, 0.02));
        rows.push(IdentityRow::new(
            "plane H_beta = c_(beta+1) dist^-beta normal",
            &ph,
            0.02,
        ));
        rows.push(IdentityRow::new("plane s_X = 1", &ps, 0.02));
        rows.push(IdentityRow::new("plane ratio gradient = 0", &pr, 0.02));
        rows.push(IdentityRow::new("plane V = 0", &pv, 0.02));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_lipschitz_graph, make_plane_set, sawtooth};

    #[test]
    fn probes_respect_the_distance_range() {
        let s = make_plane_set(3, 1, 1.0, 0.01).unwrap();
        let cfg = VerifyConfig {
            probes: 50,
            ..Default::default()
        };
        let p = sample_probes(&s, &cfg).unwrap();
        assert_eq!(p.len(), 50);
        for x in &p {
            let t = s.dist_to_gamma(x);
            assert!(t >= 0.1 && t <= 0.2);
        }
        assert_eq!(p, sample_probes(&s, &cfg).unwrap());
    }

    #[test]
    fn plane_table_passes() {
        let s = make_plane_set(3, 1, 1.0, 0.005).unwrap();
        let cfg = VerifyConfig {
            probes: 20,
            ..Default::default()
        };
        let rows = verify_identities(&s, &cfg, true).unwrap();
        assert_eq!(rows.len(), 11);
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn graph_table_passes() {
        let g = make_lipschitz_graph(3, 1, &sawtooth(0.2, 0.25, 2), 0.2, 1.0, 0.005).unwrap();
        let cfg = VerifyConfig {
            probes: 20,
            ..Default::default()
        };
        let rows = verify_identities(&g, &cfg, false).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn empty_range_is_rejected() {
        let s = make_plane_set(3, 1, 1.0, 0.01).unwrap();
        let cfg = VerifyConfig {
            max_dist: 0.05,
            min_dist: 10.0,
            ..Default::default()
        };
        assert!(sample_probes(&s, &cfg).is_err());
    }
}
