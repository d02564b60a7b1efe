//! Whitney cubes of Ω = ℝⁿ \ Γ, their boundary anchors ξ_Q, the α-numbers α_{Q,k},
//! the flat approximations μ_Q, the quantity a(X) and the UR square sums.

use crate::error::{Error, Result};
use crate::geometry::{ahlfors_constant, sample_balls, Ball, DiscreteMeasure, Ray};
use crate::kdtree::{dist2, KdTree};
use crate::wasserstein::{
    aggregate, alpha_of_points, alpha_upper_bound, complement, count_cells, dist_xr, dot, flat_sample_step,
    AlphaConfig, FlatMeasure, WeightedPoints,
};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

/// Depth limit for a decomposition of the whole box.
pub const MAX_DEPTH: u32 = 14;
/// Depth limit when the decomposition is restricted to a region of interest.
pub const MAX_REGION_DEPTH: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WhitneyConfig {
    /// Scale factor Λ of the α balls B(ξ_Q, Λ 2^k ℓ(Q)).
    pub lambda: f64,
    /// Threshold between fitted and constructed flat measures.
    pub epsilon: f64,
    pub k_max: u32,
    pub alpha: AlphaConfig,
}

impl Default for WhitneyConfig {
    fn default() -> Self {
        WhitneyConfig {
            lambda: 8.0,
            epsilon: 0.3,
            k_max: 8,
            alpha: AlphaConfig::default(),
        }
    }
}

/// Axis-aligned root cube of the dyadic grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadicBox {
    pub lo: Vec<f64>,
    pub side: f64,
}

impl DyadicBox {
    pub fn new(lo: Vec<f64>, side: f64) -> Result<Self> {
        if lo.is_empty() || lo.len() > 4 || !(side > 0.0) || !side.is_finite() {
            return Err(Error::Parameter(format!(
                "box needs 1..=4 coordinates and a positive side, got {} and {side}",
                lo.len()
            )));
        }
        Ok(DyadicBox { lo, side })
    }

    /// Power-of-two box centered on the bounding box of the support, with margin ≥ side/4.
    pub fn around(sigma: &DiscreteMeasure) -> Self {
        let n = sigma.ambient_dim;
        let (mut lo, mut hi) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
        for i in 0..sigma.len() {
            for (a, &v) in sigma.point(i).iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let width = (0..n).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(sigma.spacing);
        let side = 2f64.powi((2.0 * width).log2().ceil() as i32);
        let lo = (0..n).map(|a| 0.5 * (lo[a] + hi[a]) - 0.5 * side).collect();
        DyadicBox { lo, side }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lo).all(|(v, l)| *v >= *l && *v < l + self.side)
    }
}

type CubeKey = (u32, [i64; 4]);

fn key_of(level: u32, corner: &[i64]) -> CubeKey {
    let mut k = [0i64; 4];
    k[..corner.len()].copy_from_slice(corner);
    (level, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MuBranch {
    /// α_Q ≤ ε: the minimizing flat measure of the α search.
    Fitted,
    /// α_Q > ε: c = 1 and a plane through ξ_Q separated from 20Q.
    Constructed,
}

#[derive(Debug, Clone, Serialize)]
pub struct MuQ {
    pub flat: FlatMeasure,
    pub branch: MuBranch,
    pub alpha_q: f64,
    /// dist_Q(μ_Q, σ).
    pub alpha_tilde: f64,
    pub dist_2q: f64,
    pub dist_xi: f64,
    /// Names of the failed post-checks; empty when all pass.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitneyCube {
    pub level: u32,
    pub corner: Vec<i64>,
    pub side: f64,
    /// ℓ(Q) = √n · side.
    pub diameter: f64,
    pub center: Vec<f64>,
    pub xi: Vec<f64>,
    /// False when no support point lies in 60Q and ξ_Q fell back to the nearest one.
    pub xi_in_60q: bool,
    pub alpha: BTreeMap<u32, f64>,
    /// k ↦ reason for α_{Q,k} being unavailable.
    pub excluded: BTreeMap<u32, String>,
    pub mu: Option<MuQ>,
}

impl WhitneyCube {
    pub fn alpha_ball(&self, k: u32, lambda: f64) -> Ball {
        Ball::new(self.xi.clone(), lambda * 2f64.powi(k as i32) * self.diameter)
    }

    /// Half-open membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        let h = 0.5 * self.side;
        x.iter().zip(&self.center).all(|(v, c)| *v >= c - h && *v < c + h)
    }

    /// Euclidean distance from x to the cube dilated by `factor` about its center.
    pub fn dist_to_dilate(&self, x: &[f64], factor: f64) -> f64 {
        let h = 0.5 * factor * self.side;
        x.iter()
            .zip(&self.center)
            .map(|(v, c)| ((v - c).abs() - h).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Ray against closed cube of half-side `half`, by the slab method.
fn ray_meets_cube(ray: &Ray, center: &[f64], half: f64) -> bool {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..center.len() {
        let (s, d) = (ray.start[a] - center[a], ray.dir[a]);
        if d.abs() < 1e-300 {
            if s.abs() > half {
                return false;
            }
            continue;
        }
        let (mut lo, mut hi) = ((-half - s) / d, (half - s) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Γ (samples and completion rays) meets the closed cube.
fn gamma_meets_cube(sigma: &DiscreteMeasure, center: &[f64], half: f64) -> bool {
    sigma.tree().any_in_cube(center, half) || sigma.completion.iter().any(|r| ray_meets_cube(r, center, half))
}

/// Distance between the closed cube of half-side `half` and an affine plane.
pub fn dist_cube_plane(center: &[f64], half: f64, mu: &FlatMeasure) -> f64 {
    let n = center.len();
    // minimize |(I - BBᵀ)(y - o)|² over the cube by coordinate descent
    let mut proj = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let bb: f64 = mu.basis.iter().map(|e| e[a] * e[b]).sum();
            proj[a][b] = if a == b { 1.0 - bb } else { -bb };
        }
    }
    let mut y = center.to_vec();
    let resid = |y: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|a| (0..n).map(|b| proj[a][b] * (y[b] - mu.offset[b])).sum())
            .collect()
    };
    let mut g = resid(&y);
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for a in 0..n {
            let paa = proj[a][a];
            if paa < 1e-14 {
                continue;
            }
            // g = P(y - o); ∂/∂y_a of |g|² / 2 is (P g)_a = g_a since P is a projector
            let target = (y[a] - g[a] / paa).clamp(center[a] - half, center[a] + half);
            let dy = target - y[a];
            if dy != 0.0 {
                for (b, gb) in g.iter_mut().enumerate() {
                    *gb += proj[b][a] * dy;
                }
                y[a] = target;
                moved = moved.max(dy.abs());
            }
        }
        if moved <= 1e-15 * (1.0 + half) {
            break;
        }
    }
    dot(&g, &g).sqrt()
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub bbox: DyadicBox,
    pub max_depth: u32,
    /// Support tolerance used in the 20Q / 60Q tests.
    pub tol: f64,
    pub region: Option<Ball>,
    pub cubes: Vec<WhitneyCube>,
    /// Cubes still meeting 20Q ∩ Γ at the maximal depth.
    pub undecided: Vec<(u32, Vec<i64>)>,
    index: HashMap<CubeKey, usize>,
    centers: KdTree,
}

/// Maximal dyadic cubes Q of the box with 20Q ∩ Γ = ∅.
pub fn decompose(sigma: &DiscreteMeasure, bbox: &DyadicBox, max_depth: u32) -> Result<Decomposition> {
    if max_depth > MAX_DEPTH {
        return Err(Error::Parameter(format!("max_depth {max_depth} above {MAX_DEPTH}")));
    }
    build(sigma, bbox, max_depth, None)
}

/// Decomposition restricted to the cubes Q with 2Q ∩ region ≠ ∅.
pub fn decompose_region(
    sigma: &DiscreteMeasure,
    bbox: &DyadicBox,
    max_depth: u32,
    region: &Ball,
) -> Result<Decomposition> {
    if max_depth > MAX_REGION_DEPTH {
        return Err(Error::Parameter(format!(
            "max_depth {max_depth} above {MAX_REGION_DEPTH}"
        )));
    }
    build(sigma, bbox, max_depth, Some(region.clone()))
}

fn build(sigma: &DiscreteMeasure, bbox: &DyadicBox, max_depth: u32, region: Option<Ball>) -> Result<Decomposition> {
    let n = bbox.dim();
    if n != sigma.ambient_dim {
        return Err(Error::Parameter(format!(
            "box dimension {n} but ambient dimension {}",
            sigma.ambient_dim
        )));
    }
    let margin = bbox.side / 4.0 * (1.0 - 1e-12);
    for i in 0..sigma.len() {
        let p = sigma.point(i);
        if p.iter()
            .zip(&bbox.lo)
            .any(|(v, l)| *v < l + margin || *v > l + bbox.side - margin)
        {
            return Err(Error::Parameter(format!(
                "support point {p:?} not inside the box with margin side/4"
            )));
        }
    }
    let tol = sigma.spacing;
    let mut cubes = Vec::new();
    let mut undecided = Vec::new();
    let mut stack: Vec<(u32, Vec<i64>)> = vec![(0, vec![0; n])];
    while let Some((level, corner)) = stack.pop() {
        let side = bbox.side / 2f64.powi(level as i32);
        let center: Vec<f64> = (0..n).map(|a| bbox.lo[a] + (corner[a] as f64 + 0.5) * side).collect();
        if let Some(b) = &region {
            let q = WhitneyCube::probe(&center, side);
            if q.dist_to_dilate(&b.center, 2.0) > b.radius {
                continue;
            }
        }
        if !gamma_meets_cube(sigma, &center, 10.0 * side + tol) {
            let (xi, xi_in_60q) = match sigma.tree().nearest_in_cube(&center, &center, 30.0 * side + tol) {
                Some((i, _)) => (sigma.point(i).to_vec(), true),
                None => (sigma.point(sigma.nearest(&center).0).to_vec(), false),
            };
            cubes.push(WhitneyCube {
                level,
                corner,
                side,
                diameter: (n as f64).sqrt() * side,
                center,
                xi,
                xi_in_60q,
                alpha: BTreeMap::new(),
                excluded: BTreeMap::new(),
                mu: None,
            });
        } else if level == max_depth {
            undecided.push((level, corner));
        } else {
            for child in 0..(1usize << n) {
                let c: Vec<i64> = (0..n).map(|a| 2 * corner[a] + ((child >> a) & 1) as i64).collect();
                stack.push((level + 1, c));
            }
        }
    }
    cubes.sort_by(|a, b| (a.level, &a.corner).cmp(&(b.level, &b.corner)));
    undecided.sort();
    let index = cubes
        .iter()
        .enumerate()
        .map(|(i, q)| (key_of(q.level, &q.corner), i))
        .collect();
    let flat: Vec<f64> = cubes.iter().flat_map(|q| q.center.iter().copied()).collect();
    let centers = KdTree::new(&flat, n);
    Ok(Decomposition {
        bbox: bbox.clone(),
        max_depth,
        tol,
        region,
        cubes,
        undecided,
        index,
        centers,
    })
}

impl WhitneyCube {
    fn probe(center: &[f64], side: f64) -> Self {
        WhitneyCube {
            level: 0,
            corner: Vec::new(),
            side,
            diameter: 0.0,
            center: center.to_vec(),
            xi: Vec::new(),
            xi_in_60q: false,
            alpha: BTreeMap::new(),
            excluded: BTreeMap::new(),
            mu: None,
        }
    }
}

/// Result of re-checking both halves of the Whitney condition on every cube.
#[derive(Debug, Clone, Serialize)]
pub struct WhitneyReport {
    pub cubes: usize,
    pub inner_failures: usize,
    pub outer_failures: usize,
}

impl Decomposition {
    pub fn dim(&self) -> usize {
        self.bbox.dim()
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn side_at(&self, level: u32) -> f64 {
        self.bbox.side / 2f64.powi(level as i32)
    }

    pub fn find(&self, level: u32, corner: &[i64]) -> Option<usize> {
        self.index.get(&key_of(level, corner)).copied()
    }

    /// Index of the retained cube containing x.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if !self.bbox.contains(x) {
            return None;
        }
        for level in 0..=self.max_depth {
            let s = self.side_at(level);
            let corner: Vec<i64> = x
                .iter()
                .zip(&self.bbox.lo)
                .map(|(v, l)| ((v - l) / s).floor() as i64)
                .collect();
            if let Some(i) = self.find(level, &corner) {
                return Some(i);
            }
        }
        None
    }

    /// Cube containing x, or the cube with the nearest center (flagged) when x is in an
    /// undecided part of the box.
    pub fn cube_for(&self, x: &[f64]) -> Result<(usize, bool)> {
        if !self.bbox.contains(x) {
            return Err(Error::Domain(format!("{x:?} lies outside the decomposed box")));
        }
        if let Some(i) = self.locate(x) {
            return Ok((i, false));
        }
        match self.centers.nearest(x) {
            Some((i, _)) => Ok((i, true)),
            None => Err(Error::Domain("decomposition has no cubes".into())),
        }
    }

    /// Re-checks 20Q ∩ Γ = ∅ and 60Q ∩ Γ ≠ ∅ against the support.
    pub fn check_whitney_condition(&self, sigma: &DiscreteMeasure) -> WhitneyReport {
        let mut rep = WhitneyReport {
            cubes: self.cubes.len(),
            inner_failures: 0,
            outer_failures: 0,
        };
        for q in &self.cubes {
            if gamma_meets_cube(sigma, &q.center, 10.0 * q.side + self.tol) {
                rep.inner_failures += 1;
            }
            if !gamma_meets_cube(sigma, &q.center, 30.0 * q.side + self.tol) {
                rep.outer_failures += 1;
            }
        }
        rep
    }

    /// #{R : 2R ∩ 2Q ≠ ∅} for every cube (Q itself included), searching levels ℓ(Q)/4 .. 4ℓ(Q).
    pub fn neighbor_counts(&self) -> Vec<usize> {
        let n = self.dim();
        self.cubes
            .iter()
            .map(|q| {
                let mut count = 0;
                for level in q.level.saturating_sub(2)..=(q.level + 2).min(self.max_depth) {
                    let s = self.side_at(level);
                    let reach = q.side + s;
                    let lo: Vec<i64> = (0..n)
                        .map(|a| ((q.center[a] - reach - self.bbox.lo[a]) / s).floor() as i64)
                        .collect();
                    let hi: Vec<i64> = (0..n)
                        .map(|a| ((q.center[a] + reach - self.bbox.lo[a]) / s).ceil() as i64)
                        .collect();
                    let mut idx = lo.clone();
                    loop {
                        if let Some(j) = self.find(level, &idx) {
                            let r = &self.cubes[j];
                            let gap = (0..n).map(|a| (q.center[a] - r.center[a]).abs()).fold(0.0, f64::max);
                            if gap <= q.side + r.side + 1e-12 * self.bbox.side {
                                count += 1;
                            }
                        }
                        let mut a = 0;
                        loop {
                            if a == n {
                                break;
                            }
                            idx[a] += 1;
                            if idx[a] <= hi[a] {
                                break;
                            }
                            idx[a] = lo[a];
                            a += 1;
                        }
                        if a == n {
                            break;
                        }
                    }
                }
                count
            })
            .collect()
    }

    /// Cubes with 2Q ∩ B(x, r) ≠ ∅.
    pub fn meeting(&self, x: &[f64], r: f64) -> Vec<usize> {
        (0..self.cubes.len())
            .filter(|&i| self.cubes[i].dist_to_dilate(x, 2.0) <= r)
            .collect()
    }

    /// Σ ℓ^d over the undecided cubes with 2Q ∩ B(x, r) ≠ ∅.
    fn undecided_weight(&self, x: &[f64], r: f64, d: usize) -> f64 {
        let n = self.dim();
        self.undecided
            .iter()
            .filter_map(|(level, corner)| {
                let side = self.side_at(*level);
                let center: Vec<f64> = (0..n)
                    .map(|a| self.bbox.lo[a] + (corner[a] as f64 + 0.5) * side)
                    .collect();
                let q = WhitneyCube::probe(&center, side);
                (q.dist_to_dilate(x, 2.0) <= r).then(|| ((n as f64).sqrt() * side).powi(d as i32))
            })
            .sum()
    }

    /// CSV dump: level, corner, ℓ(Q), ξ_Q, α_{Q,0..k_max}, μ_Q and post-check flags.
    pub fn write_csv<W: Write>(&self, mut out: W, k_max: u32) -> Result<()> {
        let n = self.dim();
        let mut head: Vec<String> = vec!["level".into()];
        head.extend((0..n).map(|a| format!("corner_{a}")));
        head.push("ell".into());
        head.extend((0..n).map(|a| format!("xi_{a}")));
        head.extend((0..=k_max).map(|k| format!("alpha_{k}")));
        head.push("mu_branch".into());
        head.push("mu_c".into());
        head.extend((0..n).map(|a| format!("mu_offset_{a}")));
        head.push("mu_basis".into());
        head.extend(["alpha_tilde", "dist_2q", "dist_xi", "flags"].map(String::from));
        writeln!(out, "{}", head.join(","))?;
        for q in &self.cubes {
            let mut row: Vec<String> = vec![q.level.to_string()];
            row.extend(q.corner.iter().map(|c| c.to_string()));
            row.push(q.diameter.to_string());
            row.extend(q.xi.iter().map(|v| v.to_string()));
            row.extend((0..=k_max).map(|k| q.alpha.get(&k).map(|v| v.to_string()).unwrap_or_default()));
            let mut flags: Vec<String> = Vec::new();
            if !q.xi_in_60q {
                flags.push("xi_outside_60q".into());
            }
            match &q.mu {
                Some(m) => {
                    row.push(format!("{:?}", m.branch).to_lowercase());
                    row.push(m.flat.c.to_string());
                    row.extend(m.flat.offset.iter().map(|v| v.to_string()));
                    let basis: Vec<String> = m.flat.basis.iter().flatten().map(|v| v.to_string()).collect();
                    row.push(basis.join(" "));
                    row.push(m.alpha_tilde.to_string());
                    row.push(m.dist_2q.to_string());
                    row.push(m.dist_xi.to_string());
                    flags.extend(m.flags.iter().cloned());
                }
                None => row.extend(std::iter::repeat(String::new()).take(n + 6)),
            }
            row.push(flags.join(" "));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// α value with the flat measure that realizes it.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaEval {
    pub value: f64,
    pub flat: FlatMeasure,
    pub aggregation_error: f64,
    pub cached: bool,
}

#[derive(Debug, Clone)]
struct Stored {
    value: f64,
    offset: Vec<f64>,
    basis: Vec<Vec<f64>>,
    c: f64,
    aggregation_error: f64,
}

/// Relative grid on which configurations are compared.
const QUANTUM: f64 = 1e-7;

/// α-numbers memoized by the normalized point configuration (p - x)/r, w/r^d.
///
/// Inputs with more than cap/2 points are first aggregated on a lattice anchored at
/// the ball center, so that self-similar sets reuse coarse configurations.
#[derive(Debug, Default)]
pub struct AlphaCache {
    entries: HashMap<Vec<i64>, Stored>,
    pub hits: usize,
    pub misses: usize,
}

impl AlphaCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evaluate(&mut self, sigma: &DiscreteMeasure, ball: &Ball, cfg: &AlphaConfig) -> Result<AlphaEval> {
        let (lo, hi) = sigma.window();
        let r = ball.radius;
        if r > hi * (1.0 + 1e-12) || !sigma.is_interior(&ball.center, r) {
            return Err(Error::Truncation(format!("ball of radius {r} exceeds the data extent")));
        }
        if r < lo * (1.0 - 1e-12) {
            return Err(Error::Resolution(format!("radius {r} below the resolution limit {lo}")));
        }
        let n = sigma.ambient_dim;
        let d = sigma.intrinsic_dim;
        let mut local = WeightedPoints::restricted(sigma, ball);
        let mut spacing = sigma.spacing;
        let mut pre_error = 0.0;
        let half = (cfg.lp.cap / 2).max(d + 1);
        if local.len() > half {
            let mut s = r / 4096.0;
            while count_cells(&local, &ball.center, s) > half {
                s *= 2.0;
            }
            local = aggregate(&local, &ball.center, s);
            spacing = spacing.max(s);
            pre_error = (n as f64).sqrt() * s * local.total() * r.powi(-(d as i32) - 1);
        }
        let wnorm = r.powi(d as i32);
        let q = |v: f64| (v / QUANTUM).round() as i64;
        let mut rows: Vec<Vec<i64>> = (0..local.len())
            .map(|i| {
                let mut row: Vec<i64> = local
                    .point(i)
                    .iter()
                    .zip(&ball.center)
                    .map(|(p, c)| q((p - c) / r))
                    .collect();
                row.push(q(local.weights[i] / wnorm));
                row
            })
            .collect();
        rows.sort_unstable();
        let mut key = vec![n as i64, d as i64, q(spacing / r)];
        key.extend(rows.into_iter().flatten());

        let stored = match self.entries.get(&key) {
            Some(s) => {
                self.hits += 1;
                s.clone()
            }
            None => {
                self.misses += 1;
                let res = alpha_of_points(&local, d, spacing, ball, cfg)?;
                let s = Stored {
                    value: res.value,
                    offset: res
                        .flat
                        .offset
                        .iter()
                        .zip(&ball.center)
                        .map(|(o, c)| (o - c) / r)
                        .collect(),
                    basis: res.flat.basis.clone(),
                    c: res.flat.c,
                    aggregation_error: res.aggregation_error,
                };
                self.entries.insert(key, s.clone());
                return Ok(AlphaEval {
                    value: res.value,
                    flat: res.flat,
                    aggregation_error: res.aggregation_error + pre_error,
                    cached: false,
                });
            }
        };
        let offset = stored.offset.iter().zip(&ball.center).map(|(o, c)| c + r * o).collect();
        Ok(AlphaEval {
            value: stored.value,
            flat: FlatMeasure {
                offset,
                basis: stored.basis,
                c: stored.c,
            },
            aggregation_error: stored.aggregation_error + pre_error,
            cached: true,
        })
    }
}

/// a(X) with its certified truncation tail.
#[derive(Debug, Clone, Serialize)]
pub struct AValue {
    pub value: f64,
    /// Bound on the omitted terms k > k_used.
    pub tail: f64,
    pub cube: usize,
    /// X was not inside a retained cube and the nearest one was used.
    pub flagged: bool,
    pub k_used: u32,
}

/// Normalized square sum Σ α_{Q,k}² ℓ(Q)^d / r^d over 𝒲(x, r).
#[derive(Debug, Clone, Serialize)]
pub struct SquareSum {
    pub value: f64,
    pub cubes: usize,
    pub included: usize,
    /// Cubes whose α ball left the resolution window.
    pub excluded: usize,
    /// ℓ^d-weighted share of 𝒲(x, r) (undecided cubes included) that entered the sum.
    pub coverage: f64,
}

/// Whitney decomposition bound to a set, with α evaluation and bookkeeping.
pub struct WhitneyAnalysis<'a> {
    pub sigma: &'a DiscreteMeasure,
    pub decomposition: Decomposition,
    pub cfg: WhitneyConfig,
    pub cache: AlphaCache,
    c_sigma: Option<f64>,
}

impl<'a> WhitneyAnalysis<'a> {
    pub fn new(sigma: &'a DiscreteMeasure, decomposition: Decomposition, cfg: WhitneyConfig) -> Result<Self> {
        if !(cfg.lambda > 0.0) || !(cfg.epsilon >= 0.0) {
            return Err(Error::Parameter("Λ must be positive and ε nonnegative".into()));
        }
        Ok(WhitneyAnalysis {
            sigma,
            decomposition,
            cfg,
            cache: AlphaCache::new(),
            c_sigma: None,
        })
    }

    /// Ahlfors constant estimated on 32 seeded balls, used for the uniform α bound.
    pub fn c_sigma(&mut self) -> f64 {
        if let Some(c) = self.c_sigma {
            return c;
        }
        let balls = sample_balls(self.sigma, 32, 0);
        let c = ahlfors_constant(self.sigma, &balls, f64::INFINITY).c_sigma;
        let c = if c.is_finite() { c } else { 1.0 };
        self.c_sigma = Some(c);
        c
    }

    fn eval(&mut self, idx: usize, k: u32) -> Result<AlphaEval> {
        let ball = self.decomposition.cubes[idx].alpha_ball(k, self.cfg.lambda);
        self.cache.evaluate(self.sigma, &ball, &self.cfg.alpha)
    }

    /// α_{Q,k}, memoized on the cube.
    pub fn alpha_qk(&mut self, idx: usize, k: u32) -> Result<f64> {
        let q = &self.decomposition.cubes[idx];
        if let Some(v) = q.alpha.get(&k) {
            return Ok(*v);
        }
        if let Some(why) = q.excluded.get(&k) {
            return Err(Error::Truncation(why.clone()));
        }
        match self.eval(idx, k) {
            Ok(e) => {
                self.decomposition.cubes[idx].alpha.insert(k, e.value);
                Ok(e.value)
            }
            Err(e) => {
                self.decomposition.cubes[idx].excluded.insert(k, e.to_string());
                Err(e)
            }
        }
    }

    /// Flat measure μ_Q with its post-checks.
    pub fn mu_q(&mut self, idx: usize) -> Result<MuQ> {
        if let Some(m) = &self.decomposition.cubes[idx].mu {
            return Ok(m.clone());
        }
        let fit = self.eval(idx, 0)?;
        self.decomposition.cubes[idx].alpha.insert(0, fit.value);
        let q = &self.decomposition.cubes[idx];
        let n = q.center.len();
        let d = self.sigma.intrinsic_dim;
        let ball = q.alpha_ball(0, self.cfg.lambda);
        let (flat, branch, alpha_tilde) = if fit.value <= self.cfg.epsilon {
            (fit.flat, MuBranch::Fitted, fit.value)
        } else {
            // separate ξ_Q from 20Q by the hyperplane orthogonal to ξ_Q - y*, y* ∈ 20Q nearest
            let h = 10.0 * q.side;
            let near: Vec<f64> = (0..n)
                .map(|a| q.xi[a].clamp(q.center[a] - h, q.center[a] + h))
                .collect();
            let mut u: Vec<f64> = (0..n).map(|a| q.xi[a] - near[a]).collect();
            let norm = dot(&u, &u).sqrt();
            if !(norm > 0.0) {
                return Err(Error::Degenerate("ξ_Q lies in 20Q".into()));
            }
            u.iter_mut().for_each(|v| *v /= norm);
            let basis: Vec<Vec<f64>> = complement(&[u], n).into_iter().take(d).collect();
            let flat = FlatMeasure::new(q.xi.clone(), basis, 1.0)?;
            let step = self.sigma.spacing.max(ball.radius / 64.0);
            let sample = flat_sample_step(&flat, &ball, step);
            let local = WeightedPoints::restricted(self.sigma, &ball);
            let t = dist_xr(&sample, &local, &ball, d, &self.cfg.alpha.lp)?.value;
            (flat, MuBranch::Constructed, t)
        };
        let tol = self.decomposition.tol;
        let dist_2q = dist_cube_plane(&q.center, q.side, &flat);
        let dist_xi = flat.distance(&q.xi);
        let mut flags = Vec::new();
        if dist_2q < 5.0 * q.side - tol {
            flags.push("plane_near_2q".to_string());
        }
        if dist_xi > 5.0 * q.diameter + tol {
            flags.push("plane_far_from_xi".to_string());
        }
        let eps = self.cfg.epsilon.max(1e-12);
        if flat.c < eps.min(1.0) || flat.c > 1.0 / eps.min(1.0) {
            flags.push("density_out_of_range".to_string());
        }
        let mu = MuQ {
            flat,
            branch,
            alpha_q: fit.value,
            alpha_tilde,
            dist_2q,
            dist_xi,
            flags,
        };
        self.decomposition.cubes[idx].mu = Some(mu.clone());
        Ok(mu)
    }

    /// Largest ã_Q / α_Q over the cubes whose μ_Q has been built.
    pub fn mu_constant(&self) -> f64 {
        self.decomposition
            .cubes
            .iter()
            .filter_map(|q| q.mu.as_ref())
            .map(|m| {
                if m.alpha_q > 0.0 {
                    m.alpha_tilde / m.alpha_q
                } else {
                    1.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// a(X) = α(X) + Σ_{k ≤ k_max} 2^{-k min(α, β)} α_{Q,k}, summed while the α balls
    /// stay inside the data; the remaining terms are bounded by the uniform α bound.
    pub fn a_x(&mut self, x: &[f64], alpha: f64, beta: f64) -> Result<AValue> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Parameter("a(X) needs α, β > 0".into()));
        }
        let (cube, flagged) = self.decomposition.cube_for(x)?;
        let m = alpha.min(beta);
        let mu = self.mu_q(cube)?;
        let mut value = mu.alpha_tilde + mu.alpha_q;
        let mut k_used = 0;
        for k in 1..=self.cfg.k_max {
            match self.alpha_qk(cube, k) {
                Ok(v) => {
                    value += 2f64.powf(-(k as f64) * m) * v;
                    k_used = k;
                }
                Err(_) => break,
            }
        }
        let bound = alpha_upper_bound(self.c_sigma());
        let q = 2f64.powf(-m);
        let tail = bound * q.powi(k_used as i32 + 1) / (1.0 - q);
        Ok(AValue {
            value,
            tail,
            cube,
            flagged,
            k_used,
        })
    }

    pub fn ur_square_sum(&mut self, x: &[f64], r: f64, k: u32) -> Result<SquareSum> {
        if !(r > 0.0) {
            return Err(Error::Parameter("radius must be positive".into()));
        }
        if let Some(reg) = &self.decomposition.region {
            if dist2(&reg.center, x).sqrt() + r > reg.radius * (1.0 + 1e-12) {
                return Err(Error::State(format!(
                    "decomposition region does not cover B({x:?}, {r})"
                )));
            }
        }
        let d = self.sigma.intrinsic_dim as i32;
        let idx = self.decomposition.meeting(x, r);
        let mut sum = 0.0;
        let (mut included, mut excluded) = (0, 0);
        let (mut w_in, mut w_all) = (0.0, 0.0);
        for &i in &idx {
            let w = self.decomposition.cubes[i].diameter.powi(d);
            w_all += w;
            match self.alpha_qk(i, k) {
                Ok(a) => {
                    sum += a * a * w;
                    w_in += w;
                    included += 1;
                }
                Err(_) => excluded += 1,
            }
        }
        w_all += self.decomposition.undecided_weight(x, r, d as usize);
        Ok(SquareSum {
            value: sum / r.powi(d),
            cubes: idx.len(),
            included,
            excluded,
            coverage: if w_all > 0.0 { w_in / w_all } else { 0.0 },
        })
    }
}

/// 20Q ∩ Γ = ∅ for the cube of the given center and side.
fn is_free(sigma: &DiscreteMeasure, center: &[f64], side: f64, tol: f64) -> bool {
    !gamma_meets_cube(sigma, center, 10.0 * side + tol)
}

/// Q is a retained Whitney cube: free, with a non-free parent.
pub fn is_whitney(sigma: &DiscreteMeasure, bbox: &DyadicBox, tol: f64, level: u32, corner: &[i64]) -> bool {
    let side = bbox.side / 2f64.powi(level as i32);
    let center: Vec<f64> = corner
        .iter()
        .zip(&bbox.lo)
        .map(|(c, l)| l + (*c as f64 + 0.5) * side)
        .collect();
    if !is_free(sigma, &center, side, tol) {
        return false;
    }
    if level == 0 {
        return true;
    }
    let pc: Vec<f64> = corner
        .iter()
        .zip(&bbox.lo)
        .map(|(c, l)| l + (c.div_euclid(2) as f64 + 0.5) * 2.0 * side)
        .collect();
    !is_free(sigma, &pc, 2.0 * side, tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CensusConfig {
    /// Samples per level when the level is estimated.
    pub samples: usize,
    /// Levels with at most this many candidate cubes are enumerated exactly.
    pub exact_limit: usize,
    pub seed: u64,
}

impl Default for CensusConfig {
    fn default() -> Self {
        CensusConfig {
            samples: 400,
            exact_limit: 4000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelSum {
    pub level: u32,
    pub side: f64,
    /// Contribution Σ α² ℓ^d / r^d of the level.
    pub value: f64,
    pub std_err: f64,
    pub exact: bool,
    /// (Estimated) number of Whitney cubes of the level in 𝒲(x, r).
    pub cubes: f64,
    /// (Estimated) number of them with an unavailable α.
    pub excluded: f64,
    pub weight_in: f64,
    pub weight_all: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratifiedSum {
    pub value: f64,
    pub std_err: f64,
    pub coverage: f64,
    pub levels: Vec<LevelSum>,
}

/// Per-axis index range of the level-grid cubes whose center is within sup-distance h of p.
fn index_range(p: &[f64], bbox: &DyadicBox, side: f64, h: f64) -> Vec<(i64, i64)> {
    p.iter()
        .zip(&bbox.lo)
        .map(|(v, l)| {
            let lo = ((v - h - l) / side - 0.5).ceil() as i64;
            let hi = ((v + h - l) / side - 0.5).floor() as i64;
            (lo, hi)
        })
        .collect()
}

fn range_count(range: &[(i64, i64)]) -> f64 {
    range.iter().map(|(a, b)| (b - a + 1).max(0) as f64).product()
}

/// The normalized square sum computed level by level without a stored decomposition.
///
/// Every Whitney cube of level L lies within sup-distance 20.5·side + tol of a support
/// point, so the cubes generated around nearby support points cover the level. Levels
/// with few candidates are enumerated; the others are estimated by sampling a support
/// point and then a candidate cube around it, weighting by the inverse inclusion probability.
pub fn ur_square_sum_stratified(
    sigma: &DiscreteMeasure,
    bbox: &DyadicBox,
    x: &[f64],
    r: f64,
    k: u32,
    max_level: u32,
    cfg: &WhitneyConfig,
    census: &CensusConfig,
    cache: &mut AlphaCache,
) -> Result<StratifiedSum> {
    if !(r > 0.0) {
        return Err(Error::Parameter("radius must be positive".into()));
    }
    if max_level > MAX_REGION_DEPTH {
        return Err(Error::Parameter(format!(
            "max_level {max_level} above {MAX_REGION_DEPTH}"
        )));
    }
    let n = bbox.dim();
    let d = sigma.intrinsic_dim as i32;
    let tol = sigma.spacing;
    let norm = r.powi(d);
    let mut levels = Vec::new();
    for level in 0..=max_level {
        let side = bbox.side / 2f64.powi(level as i32);
        let ell = (n as f64).sqrt() * side;
        let h = 20.5 * side + tol;
        let reach = r + (n as f64).sqrt() * (side + h);
        let pts = sigma.tree().within(x, reach);
        let ranges: Vec<Vec<(i64, i64)>> = pts
            .iter()
            .map(|&i| index_range(sigma.point(i), bbox, side, h))
            .collect();
        let counts: Vec<f64> = ranges.iter().map(|rg| range_count(rg)).collect();
        let total: f64 = counts.iter().sum();
        // (α² ℓ^d, included, whitney) for one cube
        let mut score = |corner: &[i64]| -> (f64, bool, bool) {
            if !is_whitney(sigma, bbox, tol, level, corner) {
                return (0.0, false, false);
            }
            let center: Vec<f64> = corner
                .iter()
                .zip(&bbox.lo)
                .map(|(c, l)| l + (*c as f64 + 0.5) * side)
                .collect();
            let q = WhitneyCube::probe(&center, side);
            if q.dist_to_dilate(x, 2.0) > r {
                return (0.0, false, false);
            }
            let xi = match sigma.tree().nearest_in_cube(&center, &center, 30.0 * side + tol) {
                Some((i, _)) => sigma.point(i).to_vec(),
                None => sigma.point(sigma.nearest(&center).0).to_vec(),
            };
            let ball = Ball::new(xi, cfg.lambda * 2f64.powi(k as i32) * ell);
            match cache.evaluate(sigma, &ball, &cfg.alpha) {
                Ok(e) => (e.value * e.value * ell.powi(d), true, true),
                Err(_) => (0.0, false, true),
            }
        };
        let mut out = LevelSum {
            level,
            side,
            value: 0.0,
            std_err: 0.0,
            exact: true,
            cubes: 0.0,
            excluded: 0.0,
            weight_in: 0.0,
            weight_all: 0.0,
        };
        if total <= census.exact_limit as f64 {
            let mut seen = std::collections::BTreeSet::new();
            for rg in &ranges {
                let mut idx: Vec<i64> = rg.iter().map(|p| p.0).collect();
                if rg.iter().any(|(a, b)| a > b) {
                    continue;
                }
                loop {
                    seen.insert(idx.clone());
                    let mut a = 0;
                    while a < n {
                        idx[a] += 1;
                        if idx[a] <= rg[a].1 {
                            break;
                        }
                        idx[a] = rg[a].0;
                        a += 1;
                    }
                    if a == n {
                        break;
                    }
                }
            }
            for corner in seen {
                let (v, inc, wh) = score(&corner);
                if wh {
                    out.cubes += 1.0;
                    out.weight_all += ell.powi(d);
                    if inc {
                        out.value += v;
                        out.weight_in += ell.powi(d);
                    } else {
                        out.excluded += 1.0;
                    }
                }
            }
            out.value /= norm;
        } else {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                census.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(level as u64 + 1)),
            );
            let inv: Vec<f64> = counts.iter().map(|c| if *c > 0.0 { 1.0 / c } else { 0.0 }).collect();
            let m = pts.len() as f64;
            let (mut s1, mut s2) = (0.0, 0.0);
            let (mut c1, mut x1) = (0.0, 0.0);
            let mut drawn = 0usize;
            while drawn < census.samples {
                let j = rng.gen_range(0..pts.len());
                if counts[j] == 0.0 {
                    continue;
                }
                drawn += 1;
                let corner: Vec<i64> = ranges[j].iter().map(|(a, b)| rng.gen_range(*a..=*b)).collect();
                let (v, inc, wh) = score(&corner);
                if !wh {
                    continue;
                }
                // inclusion probability of this cube under the two-stage draw
                let center: Vec<f64> = corner
                    .iter()
                    .zip(&bbox.lo)
                    .map(|(c, l)| l + (*c as f64 + 0.5) * side)
                    .collect();
                let mut pi = 0.0;
                sigma
                    .tree()
                    .for_each_within(&center, h * (n as f64).sqrt() * (1.0 + 1e-9), |i, _| {
                        if let Ok(pos) = pts.binary_search(&i) {
                            let rg = &ranges[pos];
                            if corner.iter().zip(rg).all(|(c, (a, b))| c >= a && c <= b) {
                                pi += inv[pos];
                            }
                        }
                    });
                pi /= m;
                let t = v / pi;
                s1 += t;
                s2 += t * t;
                c1 += 1.0 / pi;
                if !inc {
                    x1 += 1.0 / pi;
                }
            }
            let kf = census.samples as f64;
            let mean = s1 / kf;
            let var = (s2 / kf - mean * mean).max(0.0) / (kf - 1.0).max(1.0);
            out.exact = false;
            out.value = mean / norm;
            out.std_err = var.sqrt() / norm;
            out.cubes = c1 / kf;
            out.excluded = x1 / kf;
            out.weight_all = out.cubes * ell.powi(d);
            out.weight_in = (out.cubes - out.excluded) * ell.powi(d);
        }
        levels.push(out);
    }
    let value = levels.iter().map(|l| l.value).sum();
    let std_err = levels.iter().map(|l| l.std_err * l.std_err).sum::<f64>().sqrt();
    let (w_in, w_all) = levels
        .iter()
        .fold((0.0, 0.0), |(a, b), l| (a + l.weight_in, b + l.weight_all));
    Ok(StratifiedSum {
        value,
        std_err,
        coverage: if w_all > 0.0 { w_in / w_all } else { 0.0 },
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_cantor_set, make_lipschitz_graph, make_plane_set, sawtooth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line3() -> DiscreteMeasure {
        make_plane_set(3, 1, 0.5, 1.0 / 128.0).unwrap()
    }

    #[test]
    fn plane_cubes_sandwich_distance() {
        let s = line3();
        let bbox = DyadicBox::around(&s);
        let dec = decompose(&s, &bbox, 7).unwrap();
        assert!(!dec.is_empty());
        let lo = 1.0 / (20.0 * 3f64.sqrt() * 2.0);
        let hi = 3f64.sqrt();
        let mut checked = 0;
        for q in &dec.cubes {
            if q.side < s.spacing {
                continue;
            }
            let h = s.dist_to_gamma(&q.center);
            let ratio = q.diameter / h;
            assert!(ratio >= lo && ratio <= hi, "ℓ/h = {ratio} at level {}", q.level);
            checked += 1;
        }
        assert!(checked > 1000);
    }

    #[test]
    fn whitney_condition_holds_for_every_cube() {
        for s in [line3(), make_cantor_set(3).unwrap()] {
            let dec = decompose(&s, &DyadicBox::around(&s), 6).unwrap();
            let rep = dec.check_whitney_condition(&s);
            assert_eq!(rep.inner_failures, 0);
            assert_eq!(rep.outer_failures, 0);
            assert!(dec.cubes.iter().all(|q| q.xi_in_60q));
        }
    }

    #[test]
    fn cubes_partition_the_decided_region() {
        let s = make_lipschitz_graph(2, 1, &sawtooth(0.3, 0.25, 1), 0.3, 1.0, 1.0 / 256.0).unwrap();
        let bbox = DyadicBox::around(&s);
        let dec = decompose(&s, &bbox, 9).unwrap();
        // pairwise disjoint interiors
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let limit = 2.0 * bbox.side * 2f64.powi(-9) * 10.0 + s.spacing;
        let mut probes = 0;
        while probes < 300 {
            let x: Vec<f64> = (0..2).map(|a| bbox.lo[a] + rng.gen::<f64>() * bbox.side).collect();
            if s.dist_to_gamma(&x) < limit * 2f64.sqrt() {
                continue;
            }
            probes += 1;
            let hits = dec.cubes.iter().filter(|q| q.contains(&x)).count();
            assert_eq!(hits, 1, "{x:?}");
            assert_eq!(dec.cubes[dec.locate(&x).unwrap()].contains(&x), true);
        }
    }

    #[test]
    fn support_outside_box_is_rejected() {
        let s = line3();
        let bbox = DyadicBox::new(vec![0.0, 0.0, 0.0], 1.0).unwrap();
        assert!(matches!(decompose(&s, &bbox, 4), Err(Error::Parameter(_))));
        assert!(decompose(&s, &DyadicBox::around(&s), MAX_DEPTH + 1).is_err());
    }

    #[test]
    fn neighbor_bound_is_depth_independent() {
        let s = make_plane_set(2, 1, 1.0, 1.0 / 512.0).unwrap();
        let bbox = DyadicBox::around(&s);
        let k6 = *decompose(&s, &bbox, 6).unwrap().neighbor_counts().iter().max().unwrap();
        let k8 = *decompose(&s, &bbox, 8).unwrap().neighbor_counts().iter().max().unwrap();
        assert_eq!(k6, k8);
        assert!(k6 >= 4 && k6 <= 40);
    }

    #[test]
    fn cube_plane_distance() {
        let p = FlatMeasure::coordinate(3, 1, 1.0);
        // cube centered at (0, 3, 4) with half side 1: nearest point (0, 2, 3)
        let d = dist_cube_plane(&[0.0, 3.0, 4.0], 1.0, &p);
        assert!((d - 13f64.sqrt()).abs() < 1e-10, "{d}");
        assert_eq!(dist_cube_plane(&[5.0, 0.5, 0.0], 1.0, &p), 0.0);
        let tilted = FlatMeasure::spanned(vec![0.0; 2], &[vec![1.0, 1.0]], 1.0).unwrap();
        let d = dist_cube_plane(&[3.0, 0.0], 0.5, &tilted);
        assert!((d - 2.0 / 2f64.sqrt()).abs() < 1e-10, "{d}");
    }

    #[test]
    fn ray_cube_intersection() {
        let ray = Ray {
            start: vec![1.0, 0.0],
            dir: vec![1.0, 0.0],
            density: 1.0,
        };
        assert!(ray_meets_cube(&ray, &[3.0, 0.5], 0.6));
        assert!(!ray_meets_cube(&ray, &[3.0, 0.7], 0.6));
        assert!(!ray_meets_cube(&ray, &[0.0, 0.0], 0.5));
    }

    fn plane_analysis(s: &DiscreteMeasure) -> WhitneyAnalysis<'_> {
        let bbox = DyadicBox::around(s);
        let dec = decompose(s, &bbox, 10).unwrap();
        WhitneyAnalysis::new(s, dec, WhitneyConfig::default()).unwrap()
    }

    #[test]
    fn plane_alpha_and_mu() {
        let s = make_plane_set(2, 1, 1.0, 1.0 / 256.0).unwrap();
        let mut w = plane_analysis(&s);
        let mut seen = 0;
        for i in 0..w.decomposition.len() {
            let q = w.decomposition.cubes[i].clone();
            let ball = q.alpha_ball(0, w.cfg.lambda);
            if !s.in_window(ball.radius) || !s.is_interior(&q.xi, ball.radius) {
                continue;
            }
            let a = w.alpha_qk(i, 0).unwrap();
            assert!(a <= 5.0 * s.spacing / ball.radius, "α = {a} at R = {}", ball.radius);
            let mu = w.mu_q(i).unwrap();
            assert_eq!(mu.branch, MuBranch::Fitted);
            assert!(mu.dist_xi <= s.spacing, "{}", mu.dist_xi);
            assert!(mu.flags.is_empty(), "{:?}", mu.flags);
            seen += 1;
        }
        assert!(seen > 50);
        // translated flat configurations are reused
        assert!(w.cache.hits > w.cache.misses);
    }

    #[test]
    fn constructed_branch_misses_20q() {
        let s = make_cantor_set(5).unwrap();
        let dec = decompose(&s, &DyadicBox::around(&s), 8).unwrap();
        let cfg = WhitneyConfig {
            epsilon: 0.0,
            ..WhitneyConfig::default()
        };
        let mut w = WhitneyAnalysis::new(&s, dec, cfg).unwrap();
        let mut built = 0;
        for i in 0..w.decomposition.len() {
            let q = w.decomposition.cubes[i].clone();
            if let Ok(mu) = w.mu_q(i) {
                if mu.branch == MuBranch::Constructed {
                    assert!(dist_cube_plane(&q.center, 10.0 * q.side, &mu.flat) > 0.0);
                    assert!(mu.flags.is_empty(), "{:?}", mu.flags);
                    assert!(mu.dist_xi < 1e-12);
                    built += 1;
                }
            }
            if built >= 5 {
                break;
            }
        }
        assert!(built >= 5);
    }

    #[test]
    fn cached_alpha_matches_direct_evaluation() {
        let s = make_cantor_set(5).unwrap();
        let cfg = AlphaConfig::default();
        let mut cache = AlphaCache::new();
        // two translated copies of the same level-2 cluster
        let b1 = Ball::new(s.point(0).to_vec(), 0.06);
        let b2 = Ball::new(s.point(64).to_vec(), 0.06);
        let e1 = cache.evaluate(&s, &b1, &cfg).unwrap();
        let e2 = cache.evaluate(&s, &b2, &cfg).unwrap();
        assert!(!e1.cached && e2.cached);
        let direct = crate::wasserstein::alpha_number(&s, &b2, &cfg).unwrap();
        assert!(
            (e2.value - direct.value).abs() < 1e-9,
            "{} vs {}",
            e2.value,
            direct.value
        );
        assert!(e2.flat.distance(&b2.center) < 0.06);
    }

    #[test]
    fn alpha_window_errors() {
        let s = make_plane_set(2, 1, 1.0, 1.0 / 64.0).unwrap();
        let mut cache = AlphaCache::new();
        let cfg = AlphaConfig::default();
        let big = Ball::new(vec![0.0, 0.0], 0.5);
        assert!(matches!(cache.evaluate(&s, &big, &cfg), Err(Error::Truncation(_))));
        let edge = Ball::new(vec![0.95, 0.0], 0.1);
        assert!(matches!(cache.evaluate(&s, &edge, &cfg), Err(Error::Truncation(_))));
        let small = Ball::new(vec![0.0, 0.0], 0.01);
        assert!(matches!(cache.evaluate(&s, &small, &cfg), Err(Error::Resolution(_))));
    }

    #[test]
    fn plane_a_of_x_and_square_sum() {
        let s = make_plane_set(2, 1, 1.0, 1.0 / 512.0).unwrap();
        let mut w = plane_analysis(&s);
        for x in [[0.05, 0.1], [-0.2, -0.05], [0.1, 0.07]] {
            let a = w.a_x(&x, 1.0, 0.5).unwrap();
            let ell = w.decomposition.cubes[a.cube].diameter;
            assert!(!a.flagged);
            assert!(a.value <= 10.0 * s.spacing / ell, "a = {} at ℓ = {ell}", a.value);
            let bound = alpha_upper_bound(w.c_sigma());
            let geo: f64 = (0..=8).map(|k| 2f64.powf(-0.5 * k as f64)).sum();
            assert!(a.value + a.tail <= (1.0 + geo) * bound);
        }
        let r = 0.25;
        let s2 = make_plane_set(2, 1, 1.0, r / 500.0).unwrap();
        let bbox = DyadicBox::around(&s2);
        let region = Ball::new(vec![0.0, 0.0], r);
        let dec = decompose_region(&s2, &bbox, 12, &region).unwrap();
        let mut w2 = WhitneyAnalysis::new(&s2, dec, WhitneyConfig::default()).unwrap();
        let sum = w2.ur_square_sum(&[0.0, 0.0], r, 0).unwrap();
        assert!(sum.value <= 1e-2, "{sum:?}");
        assert!(sum.included > 0);
        assert!(w2.ur_square_sum(&[0.1, 0.0], r, 0).is_err());
    }

    #[test]
    fn outside_box_is_a_domain_error() {
        let s = line3();
        let mut w = plane_analysis(&s);
        assert!(matches!(w.a_x(&[9.0, 0.0, 0.0], 1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn csv_dump_has_one_row_per_cube() {
        let s = make_plane_set(2, 1, 1.0, 1.0 / 64.0).unwrap();
        let dec = decompose(&s, &DyadicBox::around(&s), 5).unwrap();
        let mut buf = Vec::new();
        dec.write_csv(&mut buf, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), dec.len() + 1);
        let cols = text.lines().next().unwrap().split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == cols));
    }
    fn sawtooth_graph(spacing: f64) -> DiscreteMeasure {
        make_lipschitz_graph(2, 1, &sawtooth(0.2, 0.1, 1), 0.2, 1.0, spacing).unwrap()
    }

    #[test]
    fn stratified_census_matches_decomposition() {
        let s = sawtooth_graph(1.0 / 128.0);
        let bbox = DyadicBox::around(&s);
        let x = s.point(s.nearest(&[0.07, 0.0]).0).to_vec();
        let r = 0.2;
        let cfg = WhitneyConfig::default();
        let dec = decompose_region(&s, &bbox, 10, &Ball::new(x.clone(), r)).unwrap();
        let mut w = WhitneyAnalysis::new(&s, dec, cfg).unwrap();
        let exact = w.ur_square_sum(&x, r, 0).unwrap();
        let census = CensusConfig {
            exact_limit: usize::MAX,
            ..CensusConfig::default()
        };
        let mut cache = AlphaCache::new();
        let strat = ur_square_sum_stratified(&s, &bbox, &x, r, 0, 10, &cfg, &census, &mut cache).unwrap();
        assert!(strat.levels.iter().all(|l| l.exact));
        let count: f64 = strat.levels.iter().map(|l| l.cubes).sum();
        assert_eq!(count as usize, exact.cubes);
        assert!(
            (strat.value - exact.value).abs() <= 1e-9 * exact.value,
            "{} vs {}",
            strat.value,
            exact.value
        );

        // forced sampling stays within a few standard errors of the exact sum
        let sampled = CensusConfig {
            exact_limit: 0,
            samples: 1500,
            seed: 11,
        };
        let est = ur_square_sum_stratified(&s, &bbox, &x, r, 0, 10, &cfg, &sampled, &mut cache).unwrap();
        assert!(est.levels.iter().any(|l| !l.exact));
        assert!(est.std_err > 0.0);
        assert!(
            (est.value - exact.value).abs() <= 4.0 * est.std_err,
            "{} ± {} vs {}",
            est.value,
            est.std_err,
            exact.value
        );
    }

    #[test]
    fn whitney_predicate_agrees_with_decomposition() {
        let s = make_cantor_set(3).unwrap();
        let bbox = DyadicBox::around(&s);
        let dec = decompose(&s, &bbox, 6).unwrap();
        for q in dec.cubes.iter().step_by(7) {
            assert!(is_whitney(&s, &bbox, dec.tol, q.level, &q.corner));
            if q.level < 6 {
                let child: Vec<i64> = q.corner.iter().map(|c| 2 * c).collect();
                assert!(!is_whitney(&s, &bbox, dec.tol, q.level + 1, &child));
            }
        }
    }
}
