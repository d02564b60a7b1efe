//! Normalized Wasserstein distances dist_{x,r}, α-numbers and the
//! closed-form envelope for pairs of flat measures.

use crate::error::{Error, Result};
use crate::geometry::{Ball, DiscreteMeasure};
use crate::kdtree::dist2;
use crate::neldermead;
use crate::transport::bounded_lipschitz;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use std::collections::BTreeMap;

/// Upper envelope constant for plane pairs.
pub const ENVELOPE_UPPER: f64 = 32.0;
/// Lower envelope constant for plane pairs.
pub const ENVELOPE_LOWER: f64 = 1.0 / 32.0;

/// c · Lebesgue measure on an affine d-plane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatMeasure {
    pub offset: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub c: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt; returns None if the vectors are (numerically) dependent.
pub(crate) fn orthonormalize(vectors: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        // two passes for stability
        for _ in 0..2 {
            for e in &out {
                let p = dot(&w, e);
                w.iter_mut().zip(e).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = dot(&w, &w).sqrt();
        if !(norm > 1e-12 * dot(v, v).sqrt().max(1e-300)) {
            return None;
        }
        w.iter_mut().for_each(|a| *a /= norm);
        out.push(w);
    }
    Some(out)
}

/// Completes an orthonormal family to an orthonormal basis of ℝⁿ; returns the added vectors.
pub(crate) fn complement(basis: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut all = basis.to_vec();
    let mut added = Vec::new();
    // try coordinate vectors in order of least overlap with the span
    let mut cands: Vec<(f64, usize)> = (0..n)
        .map(|k| (basis.iter().map(|e| e[k] * e[k]).sum::<f64>(), k))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, k) in cands {
        if all.len() == n {
            break;
        }
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        let mut test = all.clone();
        test.push(e);
        if let Some(ortho) = orthonormalize(&test) {
            let v = ortho.last().unwrap().clone();
            all.push(v.clone());
            added.push(v);
        }
    }
    added
}

impl FlatMeasure {
    pub fn new(offset: Vec<f64>, basis: Vec<Vec<f64>>, c: f64) -> Result<Self> {
        let n = offset.len();
        if basis.is_empty() || basis.len() >= n || basis.iter().any(|e| e.len() != n) {
            return Err(Error::Parameter(
                "flat measure needs 1 <= d < n basis vectors of length n".into(),
            ));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Parameter(format!(
                "flat measure constant must be positive, got {c}"
            )));
        }
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot(a, b) - target).abs() > 1e-10 {
                    return Err(Error::Parameter("flat measure basis is not orthonormal".into()));
                }
            }
        }
        Ok(FlatMeasure { offset, basis, c })
    }

    /// Plane through `offset` spanned by (not necessarily orthonormal) `directions`.
    pub fn spanned(offset: Vec<f64>, directions: &[Vec<f64>], c: f64) -> Result<Self> {
        let basis = orthonormalize(directions)
            .ok_or_else(|| Error::Degenerate("plane directions are linearly dependent".into()))?;
        FlatMeasure::new(offset, basis, c)
    }

    /// The coordinate d-plane through the origin.
    pub fn coordinate(n: usize, d: usize, c: f64) -> Self {
        let basis = (0..d)
            .map(|a| {
                let mut e = vec![0.0; n];
                e[a] = 1.0;
                e
            })
            .collect();
        FlatMeasure {
            offset: vec![0.0; n],
            basis,
            c,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Orthogonal projection onto the plane.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = x.iter().zip(&self.offset).map(|(a, b)| a - b).collect();
        let mut p = self.offset.clone();
        for e in &self.basis {
            let t = dot(&v, e);
            p.iter_mut().zip(e).for_each(|(a, b)| *a += t * b);
        }
        p
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        dist2(x, &self.project(x)).sqrt()
    }

    /// Orthonormal basis of the normal space.
    pub fn normals(&self) -> Vec<Vec<f64>> {
        complement(&self.basis, self.ambient_dim())
    }

    /// Unit normal at x pointing from the plane toward x (None on the plane).
    pub fn unit_normal_toward(&self, x: &[f64]) -> Option<Vec<f64>> {
        let p = self.project(x);
        let v: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a - b).collect();
        let norm = dot(&v, &v).sqrt();
        (norm > 0.0).then(|| v.iter().map(|a| a / norm).collect())
    }
}

/// Plain weighted point set (possibly empty).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WeightedPoints {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(dim: usize) -> Self {
        WeightedPoints {
            dim,
            points: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, p: &[f64], w: f64) {
        self.points.extend_from_slice(p);
        self.weights.push(w);
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// σ restricted to the closed ball.
    pub fn restricted(sigma: &DiscreteMeasure, ball: &Ball) -> Self {
        let (points, weights) = sigma.restrict(&ball.center, ball.radius);
        WeightedPoints {
            dim: sigma.ambient_dim,
            points,
            weights,
        }
    }

    /// Copy with all points and the ball scaled by λ and weights by `wscale`.
    pub fn scaled(&self, lambda: f64, wscale: f64) -> Self {
        WeightedPoints {
            dim: self.dim,
            points: self.points.iter().map(|p| p * lambda).collect(),
            weights: self.weights.iter().map(|w| w * wscale).collect(),
        }
    }

    pub fn to_measure(&self, d: usize, spacing: f64, extent: f64) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(
            self.dim,
            d,
            self.points.clone(),
            self.weights.clone(),
            spacing,
            extent,
            "flat sample",
        )
    }
}

/// Grid of step `step` on the plane patch inside the ball, anchored at the
/// projection of the ball center, cell weight c·step^d.
pub fn flat_sample_step(mu: &FlatMeasure, ball: &Ball, step: f64) -> WeightedPoints {
    let n = mu.ambient_dim();
    let d = mu.dim();
    let mut out = WeightedPoints::new(n);
    let foot = mu.project(&ball.center);
    let h2 = dist2(&foot, &ball.center);
    let r2 = ball.radius * ball.radius;
    if h2 > r2 {
        return out;
    }
    let chord = (r2 - h2).sqrt();
    let k = (chord / step + 1e-9).floor() as i64;
    let w = mu.c * step.powi(d as i32);
    let mut idx = vec![-k; d];
    let mut p = vec![0.0; n];
    loop {
        let norm2: f64 = idx.iter().map(|&v| (v * v) as f64).sum::<f64>() * step * step;
        if norm2 <= (r2 - h2) * (1.0 + 1e-12) {
            p.copy_from_slice(&foot);
            for (a, e) in mu.basis.iter().enumerate() {
                let t = idx[a] as f64 * step;
                p.iter_mut().zip(e).for_each(|(x, b)| *x += t * b);
            }
            out.push(&p, w);
        }
        let mut a = d;
        let mut done = true;
        while a > 0 {
            a -= 1;
            idx[a] += 1;
            if idx[a] <= k {
                done = false;
                break;
            }
            idx[a] = -k;
        }
        if done {
            break;
        }
    }
    out
}

/// Flat sample at resolution m (grid step r/m).
pub fn flat_sample(mu: &FlatMeasure, ball: &Ball, m: usize) -> Result<WeightedPoints> {
    if m < 8 {
        return Err(Error::Parameter(format!(
            "flat sample resolution must be >= 8, got {m}"
        )));
    }
    Ok(flat_sample_step(mu, ball, ball.radius / m as f64))
}

/// Certified optimal potential of the distance LP.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzDual {
    pub dim: usize,
    pub points: Vec<f64>,
    pub potential: Vec<f64>,
    pub objective: f64,
}

impl LipschitzDual {
    /// Largest violation of the Lipschitz and support constraints over all sample pairs.
    pub fn max_violation(&self, ball: &Ball) -> f64 {
        let count = self.potential.len();
        let pt = |k: usize| &self.points[k * self.dim..(k + 1) * self.dim];
        let mut worst = 0.0f64;
        for i in 0..count {
            let b = (ball.radius - dist2(pt(i), &ball.center).sqrt()).max(0.0);
            worst = worst.max(self.potential[i].abs() - b);
            for j in 0..i {
                let d = dist2(pt(i), pt(j)).sqrt();
                worst = worst.max((self.potential[i] - self.potential[j]).abs() - d);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LpConfig {
    /// Maximum number of LP sample points; larger inputs are aggregated on a lattice.
    pub cap: usize,
    pub max_iter: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            cap: 300,
            max_iter: 500_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistResult {
    /// r^{-d-1} · LP optimum.
    pub value: f64,
    pub iterations: usize,
    /// Lattice step used to aggregate the inputs (0 when no aggregation was needed).
    pub aggregation_step: f64,
    /// Upper bound on the change of `value` caused by the aggregation.
    pub aggregation_error: f64,
    pub dual: LipschitzDual,
}

type Key = [i64; 4];

fn cell_key(p: &[f64], center: &[f64], step: f64) -> Key {
    let mut k = [0i64; 4];
    for a in 0..p.len() {
        k[a] = ((p[a] - center[a]) / step).round() as i64;
    }
    k
}

/// Moves the mass of every lattice cell to its weighted centroid.
pub(crate) fn aggregate(ws: &WeightedPoints, center: &[f64], step: f64) -> WeightedPoints {
    let dim = ws.dim;
    let mut cells: BTreeMap<Key, (f64, [f64; 4])> = BTreeMap::new();
    for i in 0..ws.len() {
        let p = ws.point(i);
        let w = ws.weights[i];
        let e = cells.entry(cell_key(p, center, step)).or_insert((0.0, [0.0; 4]));
        e.0 += w;
        for a in 0..dim {
            e.1[a] += w * p[a];
        }
    }
    let mut out = WeightedPoints::new(dim);
    for (_, (w, s)) in cells {
        let p: Vec<f64> = (0..dim).map(|a| s[a] / w).collect();
        out.push(&p, w);
    }
    out
}

pub(crate) fn count_cells(ws: &WeightedPoints, center: &[f64], step: f64) -> usize {
    let mut keys: Vec<Key> = (0..ws.len()).map(|i| cell_key(ws.point(i), center, step)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// dist_{x,r}(μ, ν) for arbitrary weighted point sets; only mass inside the ball matters.
pub fn dist_xr(mu: &WeightedPoints, nu: &WeightedPoints, ball: &Ball, d: usize, cfg: &LpConfig) -> Result<DistResult> {
    let n = ball.center.len();
    if n > 4 {
        return Err(Error::Parameter("ambient dimension above 4 is not supported".into()));
    }
    let r = ball.radius;
    let keep = |ws: &WeightedPoints| {
        let mut out = WeightedPoints::new(n);
        for i in 0..ws.len() {
            let p = ws.point(i);
            if dist2(p, &ball.center) < r * r {
                out.push(p, ws.weights[i]);
            }
        }
        out
    };
    let (mut a, mut b) = (keep(mu), keep(nu));
    let mut step = 0.0;
    if a.len() + b.len() > cfg.cap {
        let mut s = r / 4096.0;
        while count_cells(&a, &ball.center, s) + count_cells(&b, &ball.center, s) > cfg.cap {
            s *= 2.0;
        }
        a = aggregate(&a, &ball.center, s);
        b = aggregate(&b, &ball.center, s);
        step = s;
    }
    // merge coincident points into one signed mass
    let mut merged: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
    for (ws, sign) in [(&a, 1.0), (&b, -1.0)] {
        for i in 0..ws.len() {
            let p = ws.point(i);
            let key: Vec<u64> = p.iter().map(|v| (v + 0.0).to_bits()).collect();
            merged.entry(key).or_insert_with(|| (p.to_vec(), 0.0)).1 += sign * ws.weights[i];
        }
    }
    let mut points = Vec::with_capacity(merged.len() * n);
    let mut mass = Vec::with_capacity(merged.len());
    let mut bound = Vec::with_capacity(merged.len());
    for (_, (p, m)) in merged {
        bound.push((r - dist2(&p, &ball.center).sqrt()).max(0.0));
        points.extend_from_slice(&p);
        mass.push(m);
    }
    let sol = bounded_lipschitz(&points, n, &mass, &bound, cfg.max_iter)?;
    let norm = r.powi(-(d as i32) - 1);
    let moved = a.total() + b.total();
    Ok(DistResult {
        value: sol.value * norm,
        iterations: sol.iterations,
        aggregation_step: step,
        aggregation_error: if step > 0.0 {
            (n as f64).sqrt() * step * moved * norm
        } else {
            0.0
        },
        dual: LipschitzDual {
            dim: n,
            points,
            potential: sol.potential,
            objective: sol.value,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaConfig {
    pub lp: LpConfig,
    pub max_iter: usize,
    pub xtol: f64,
    /// Flat samples use roughly the σ spacing, but at most this many points.
    pub max_flat_points: usize,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        AlphaConfig {
            lp: LpConfig::default(),
            max_iter: 200,
            xtol: 1e-4,
            max_flat_points: 20_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaResult {
    pub value: f64,
    pub flat: FlatMeasure,
    /// Value at the PCA / mass-matching initialization.
    pub initial: f64,
    pub initial_flat: FlatMeasure,
    pub evaluations: usize,
    pub lp_iterations: usize,
    pub aggregation_error: f64,
}

/// Plane parametrized by a tilt of the PCA frame, a normal offset and a log-scale on c.
struct PlaneFrame {
    bary: Vec<f64>,
    tangent: Vec<Vec<f64>>,
    normal: Vec<Vec<f64>>,
    c0: f64,
    r: f64,
}

impl PlaneFrame {
    fn params(&self) -> usize {
        let (d, k) = (self.tangent.len(), self.normal.len());
        d * k + k + 1
    }

    fn flat(&self, theta: &[f64]) -> Option<FlatMeasure> {
        let (d, k) = (self.tangent.len(), self.normal.len());
        let dirs: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                let mut e = self.tangent[a].clone();
                for j in 0..k {
                    let t = theta[a * k + j];
                    e.iter_mut().zip(&self.normal[j]).for_each(|(x, nv)| *x += t * nv);
                }
                e
            })
            .collect();
        let mut offset = self.bary.clone();
        for j in 0..k {
            let t = theta[d * k + j] * self.r;
            offset.iter_mut().zip(&self.normal[j]).for_each(|(x, nv)| *x += t * nv);
        }
        let c = self.c0 * theta[d * k + k].exp();
        FlatMeasure::spanned(offset, &dirs, c).ok()
    }
}

/// α_σ(x, r): infimum over searched flat measures of dist_{x,r}(μ, σ).
pub fn alpha_number(sigma: &DiscreteMeasure, ball: &Ball, cfg: &AlphaConfig) -> Result<AlphaResult> {
    if !sigma.in_window(ball.radius) {
        let (lo, hi) = sigma.window();
        return Err(Error::Resolution(format!(
            "radius {} outside the resolution window [{lo}, {hi}]",
            ball.radius
        )));
    }
    let local = WeightedPoints::restricted(sigma, ball);
    alpha_of_points(&local, sigma.intrinsic_dim, sigma.spacing, ball, cfg)
}

/// α-number of an explicit weighted point set (already restricted to the ball or not).
pub fn alpha_of_points(
    local: &WeightedPoints,
    d: usize,
    spacing: f64,
    ball: &Ball,
    cfg: &AlphaConfig,
) -> Result<AlphaResult> {
    let n = ball.center.len();
    let r = ball.radius;
    if local.len() < d + 1 {
        return Err(Error::Degenerate(format!(
            "{} support points in the ball, need at least {}",
            local.len(),
            d + 1
        )));
    }
    // weighted PCA
    let total = local.total();
    let mut bary = vec![0.0; n];
    for i in 0..local.len() {
        for a in 0..n {
            bary[a] += local.weights[i] * local.point(i)[a] / total;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..local.len() {
        let p = local.point(i);
        for a in 0..n {
            for b in 0..n {
                cov[(a, b)] += local.weights[i] * (p[a] - bary[a]) * (p[b] - bary[b]);
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let column = |k: usize| -> Vec<f64> { (0..n).map(|a| eig.eigenvectors[(a, k)]).collect() };
    let tangent: Vec<Vec<f64>> = order[..d].iter().map(|&k| column(k)).collect();
    let tangent = orthonormalize(&tangent).ok_or_else(|| Error::Degenerate("degenerate principal frame".into()))?;
    let normal = complement(&tangent, n);

    let flat_step = {
        let min_step = 2.0 * r / (cfg.max_flat_points as f64).powf(1.0 / d as f64);
        spacing.max(min_step).min(r / 8.0)
    };
    // mass matching with the discrete sample of the initial plane
    let mut frame = PlaneFrame {
        bary,
        tangent,
        normal,
        c0: 1.0,
        r,
    };
    let zero = vec![0.0; frame.params()];
    let unit = frame.flat(&zero).expect("PCA frame is orthonormal");
    let unit_mass = flat_sample_step(&unit, ball, flat_step).total();
    frame.c0 = if unit_mass > 0.0 {
        local.total() / unit_mass
    } else {
        1.0
    };

    let mut evaluations = 0usize;
    let mut lp_iterations = 0usize;
    let mut agg_err = 0.0f64;
    let mut failure: Option<Error> = None;
    let mut objective = |theta: &[f64]| -> f64 {
        let Some(mu) = frame.flat(theta) else {
            return f64::INFINITY;
        };
        let sample = flat_sample_step(&mu, ball, flat_step);
        evaluations += 1;
        match dist_xr(&sample, local, ball, d, &cfg.lp) {
            Ok(res) => {
                lp_iterations += res.iterations;
                agg_err = agg_err.max(res.aggregation_error);
                res.value
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let initial = objective(&zero);
    let (d_, k_) = (d, n - d);
    let mut steps = vec![0.1; d_ * k_];
    steps.extend(std::iter::repeat(0.05).take(k_));
    steps.push(0.1);
    let best = neldermead::minimize(&mut objective, &zero, &steps, cfg.max_iter, cfg.xtol);
    if let Some(e) = failure {
        if !initial.is_finite() {
            return Err(e);
        }
    }
    let initial_flat = frame.flat(&zero).expect("initial plane is valid");
    let (value, flat) = if best.value < initial {
        (
            best.value,
            frame.flat(&best.x).expect("finite objective implies a valid plane"),
        )
    } else {
        (initial, initial_flat.clone())
    };
    Ok(AlphaResult {
        value,
        flat,
        initial,
        initial_flat,
        evaluations,
        lp_iterations,
        aggregation_error: agg_err,
    })
}

/// Uniform bound on α-numbers implied by Ahlfors regularity: any ball has
/// dist_{x,r}(μ, σ) <= (σ(B) + μ(B)) r^{-d}, and the mass-matched plane has μ(B) ≈ σ(B).
pub fn alpha_upper_bound(c_sigma: f64) -> f64 {
    2.0 * c_sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlaneCase {
    Identical,
    Orthogonal,
    Steep,
    Shallow,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaneBound {
    pub lower: f64,
    pub upper: f64,
    /// Center of the envelope.
    pub estimate: f64,
    pub a_norm: f64,
    pub b_norm: f64,
    pub c1: f64,
    pub c2: f64,
    pub case: PlaneCase,
}

/// Closed-form envelope for dist_{x0,r}(μ₁, μ₂) between two flat measures.
pub fn plane_plane_bound(mu1: &FlatMeasure, mu2: &FlatMeasure, ball: &Ball) -> Result<PlaneBound> {
    let r = ball.radius;
    for mu in [mu1, mu2] {
        if mu.distance(&ball.center) > 0.5 * r * (1.0 + 1e-12) {
            return Err(Error::Precondition("plane misses B(x0, r/2)".into()));
        }
    }
    let (p1, p2) = if mu2.c <= mu1.c { (mu1, mu2) } else { (mu2, mu1) };
    let (c1, c2) = (p1.c, p2.c);
    let n = p1.ambient_dim();
    let d = p1.dim();
    let e1 = &p1.basis;
    let n1 = p1.normals();
    let origin = p1.project(&ball.center);
    // M = E1ᵀ E2 and K = N1ᵀ E2
    let m = DMatrix::from_fn(d, d, |i, j| dot(&e1[i], &p2.basis[j]));
    let k = DMatrix::from_fn(n - d, d, |i, j| dot(&n1[i], &p2.basis[j]));
    let svd_m = m.clone().svd(false, false);
    let smin = svd_m.singular_values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let make = |estimate: f64, a_norm: f64, b_norm: f64, case: PlaneCase| PlaneBound {
        lower: ENVELOPE_LOWER * estimate,
        upper: ENVELOPE_UPPER * estimate,
        estimate,
        a_norm,
        b_norm,
        c1,
        c2,
        case,
    };
    if smin < 1e-12 {
        return Ok(make(c1 + c2, f64::INFINITY, 0.0, PlaneCase::Orthogonal));
    }
    let minv = m
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("singular projection".into()))?;
    let g = &k * &minv; // y = y_p + G (x - x_p)
    let rel: Vec<f64> = p2.offset.iter().zip(&origin).map(|(a, b)| a - b).collect();
    let xp = DMatrix::from_fn(d, 1, |i, _| dot(&e1[i], &rel));
    let yp = DMatrix::from_fn(n - d, 1, |i, _| dot(&n1[i], &rel));
    let bvec = yp - &g * xp;
    let a_norm = g
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |a, &b| a.max(b));
    let b_norm = bvec.norm();
    if a_norm == 0.0 && b_norm == 0.0 && c1 == c2 {
        return Ok(make(0.0, 0.0, 0.0, PlaneCase::Identical));
    }
    if a_norm >= 1.0 {
        return Ok(make(c1, a_norm, b_norm, PlaneCase::Steep));
    }
    Ok(make(
        c1 * (a_norm + b_norm / r) + (c1 - c2),
        a_norm,
        b_norm,
        PlaneCase::Shallow,
    ))
}

/// LP distance between two flat measures, both sampled at `m` points per radius.
pub fn flat_dist(mu1: &FlatMeasure, mu2: &FlatMeasure, ball: &Ball, m: usize, cfg: &LpConfig) -> Result<DistResult> {
    let s1 = flat_sample(mu1, ball, m)?;
    let s2 = flat_sample(mu2, ball, m)?;
    dist_xr(&s1, &s2, ball, mu1.dim(), cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleRatio {
    /// dist at radius 2^k r over dist at radius r; None in the exact-equality case.
    pub ratio: Option<f64>,
    pub small: f64,
    pub large: f64,
}

/// dist_{x0, 2^k r}(μ₁, μ₂) / dist_{x0, r}(μ₁, μ₂).
pub fn monotone_scale_check(
    mu1: &FlatMeasure,
    mu2: &FlatMeasure,
    x0: &[f64],
    r: f64,
    k: u32,
    m: usize,
    cfg: &LpConfig,
) -> Result<ScaleRatio> {
    let small_ball = Ball::new(x0.to_vec(), r);
    for mu in [mu1, mu2] {
        if mu.distance(x0) > 0.5 * r * (1.0 + 1e-12) {
            return Err(Error::Precondition("plane misses B(x0, r/2)".into()));
        }
    }
    let large_ball = Ball::new(x0.to_vec(), r * 2f64.powi(k as i32));
    let small = flat_dist(mu1, mu2, &small_ball, m, cfg)?.value;
    let large = flat_dist(mu1, mu2, &large_ball, m, cfg)?.value;
    let ratio = if small <= 1e-12 && large <= 1e-12 {
        None
    } else {
        Some(large / small)
    };
    Ok(ScaleRatio { ratio, small, large })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_cantor_set, make_plane_set};
    use proptest::prelude::*;

    fn line(offset: [f64; 3], dir: [f64; 3], c: f64) -> FlatMeasure {
        FlatMeasure::spanned(offset.to_vec(), &[dir.to_vec()], c).unwrap()
    }

    #[test]
    fn chord_masses() {
        let ball = Ball::new(vec![0.0; 3], 1.0);
        let mu = line([0.0; 3], [1.0, 0.0, 0.0], 1.0);
        let s = flat_sample(&mu, &ball, 16).unwrap();
        assert!((s.total() - 2.0).abs() <= 2.0 / 16.0);
        let s3 = flat_sample(&FlatMeasure { c: 3.0, ..mu.clone() }, &ball, 16).unwrap();
        for (a, b) in s.weights.iter().zip(&s3.weights) {
            assert!((3.0 * a - b).abs() < 1e-15);
        }
        let off = line([0.0, 0.9, 0.0], [1.0, 0.0, 0.0], 2.0);
        let s = flat_sample(&off, &ball, 16).unwrap();
        let exact = 2.0 * 2.0 * (1.0f64 - 0.81).sqrt();
        assert!((s.total() - exact).abs() <= 2.0 * 2.0 / 16.0);
        let miss = line([0.0, 1.5, 0.0], [1.0, 0.0, 0.0], 1.0);
        assert!(flat_sample(&miss, &ball, 16).unwrap().is_empty());
    }

    #[test]
    fn two_point_formula() {
        let ball = Ball::new(vec![0.0; 3], 1.0);
        let cfg = LpConfig::default();
        for (p, q) in [([0.1, 0.2, 0.0], [-0.3, 0.1, 0.2]), ([0.7, 0.0, 0.0], [-0.7, 0.0, 0.0])] {
            let mut a = WeightedPoints::new(3);
            a.push(&p, 0.4);
            let mut b = WeightedPoints::new(3);
            b.push(&q, 0.4);
            let res = dist_xr(&a, &b, &ball, 1, &cfg).unwrap();
            let pq = dist2(&p, &q).sqrt();
            let bp = 1.0 - dist2(&p, &[0.0; 3]).sqrt();
            let bq = 1.0 - dist2(&q, &[0.0; 3]).sqrt();
            let expect = 0.4 * pq.min(bp + bq);
            assert!((res.value - expect).abs() < 1e-6, "{} vs {expect}", res.value);
        }
    }

    #[test]
    fn identical_inputs_give_zero() {
        let s = make_plane_set(3, 1, 1.0, 0.01).unwrap();
        let ball = Ball::new(s.point(100).to_vec(), 0.2);
        let w = WeightedPoints::restricted(&s, &ball);
        let res = dist_xr(&w, &w, &ball, 1, &LpConfig::default()).unwrap();
        assert!(res.value < 1e-8);
    }

    #[test]
    fn dual_is_admissible() {
        let c = make_cantor_set(4).unwrap();
        let ball = Ball::new(c.point(37).to_vec(), 0.3);
        let local = WeightedPoints::restricted(&c, &ball);
        let mu = line(ball.center.clone().try_into().unwrap(), [1.0, 1.0, 0.0], 0.8);
        let sample = flat_sample(&mu, &ball, 32).unwrap();
        let res = dist_xr(&sample, &local, &ball, 1, &LpConfig::default()).unwrap();
        assert!(res.dual.max_violation(&ball) <= 1e-8);
        let back = dist_xr(&local, &sample, &ball, 1, &LpConfig::default()).unwrap();
        assert!((res.value - back.value).abs() <= 1e-9 * res.value.max(1.0));
    }

    #[test]
    fn plane_alpha_is_tiny() {
        let s = make_plane_set(3, 1, 1.0, 0.01).unwrap();
        for (i, r) in [(100, 0.2), (57, 0.1), (140, 0.05)] {
            let ball = Ball::new(s.point(i).to_vec(), r);
            let a = alpha_number(&s, &ball, &AlphaConfig::default()).unwrap();
            assert!(a.value <= 5.0 * s.spacing / r, "{} at r={r}", a.value);
            assert!(a.value <= a.initial);
        }
    }

    #[test]
    fn degenerate_ball() {
        let c = make_cantor_set(2).unwrap();
        let ball = Ball::new(c.point(0).to_vec(), 0.0);
        let local = WeightedPoints::restricted(&c, &ball);
        let err = alpha_of_points(
            &local,
            1,
            c.spacing,
            &Ball::new(c.point(0).to_vec(), 0.01),
            &AlphaConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "degenerate");
    }

    #[test]
    fn envelope_cases() {
        let ball = Ball::new(vec![0.0; 3], 1.0);
        let p = line([0.0; 3], [1.0, 0.0, 0.0], 1.0);
        let b = plane_plane_bound(&p, &p, &ball).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
        let q = line([0.0; 3], [0.0, 1.0, 0.0], 1.0);
        let b = plane_plane_bound(&p, &q, &ball).unwrap();
        assert_eq!(b.case, PlaneCase::Orthogonal);
        assert_eq!(b.estimate, 2.0);
        let q = line([0.0, 0.1, 0.0], [1.0, 0.0, 0.0], 1.0);
        let b = plane_plane_bound(&p, &q, &ball).unwrap();
        assert!((b.estimate - 0.1).abs() < 1e-12 && b.a_norm < 1e-12);
        let far = line([0.0, 0.6, 0.0], [1.0, 0.0, 0.0], 1.0);
        assert_eq!(plane_plane_bound(&p, &far, &ball).unwrap_err().kind(), "precondition");
        let steep = line([0.0; 3], [1.0, 2.0, 0.0], 1.0);
        assert_eq!(plane_plane_bound(&p, &steep, &ball).unwrap().case, PlaneCase::Steep);
    }

    #[test]
    fn scale_check_cases() {
        let cfg = LpConfig::default();
        let p = line([0.0; 3], [1.0, 0.0, 0.0], 1.0);
        let x0 = [0.0; 3];
        let same = monotone_scale_check(&p, &p, &x0, 0.4, 2, 32, &cfg).unwrap();
        assert!(same.ratio.is_none());
        let q = line([0.0, 0.02, 0.0], [1.0, 0.0, 0.0], 1.0);
        for k in 1..=3 {
            let res = monotone_scale_check(&p, &q, &x0, 0.4, k, 32, &cfg).unwrap();
            assert!(res.ratio.unwrap() <= 4.0, "{:?}", res);
        }
        let t = line([0.0; 3], [1.0, 0.3, 0.0], 1.0);
        let res = monotone_scale_check(&p, &t, &x0, 0.4, 2, 32, &cfg).unwrap();
        assert!(res.ratio.unwrap() <= ENVELOPE_UPPER);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn symmetric_and_scale_invariant(seed in 0usize..1000, lambda in 0.3f64..3.0) {
            let c = make_cantor_set(3).unwrap();
            let ball = Ball::new(c.point(seed % 64).to_vec(), 0.35);
            let local = WeightedPoints::restricted(&c, &ball);
            let dir = [1.0, (seed as f64 * 0.37).sin(), 0.2];
            let mu = line(ball.center.clone().try_into().unwrap(), dir, 1.0);
            let s = flat_sample(&mu, &ball, 16).unwrap();
            let cfg = LpConfig::default();
            let v1 = dist_xr(&s, &local, &ball, 1, &cfg).unwrap().value;
            let v2 = dist_xr(&local, &s, &ball, 1, &cfg).unwrap().value;
            prop_assert!((v1 - v2).abs() <= 1e-9 * v1.max(1e-3));
            let sb = Ball::new(ball.center.iter().map(|x| x * lambda).collect(), 0.35 * lambda);
            let v3 = dist_xr(&s.scaled(lambda, lambda), &local.scaled(lambda, lambda), &sb, 1, &cfg).unwrap().value;
            prop_assert!((v1 - v3).abs() <= 1e-6 * v1.max(1e-3));
        }
    }
}
