//! Discrete Ahlfors-regular sets and basic metric queries.

use crate::error::{Error, Result};
use crate::kdtree::{dist2, KdTree};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Analytic half-line carrying arc-length measure with constant density.
///
/// Patches of unbounded one-dimensional sets carry two of these so that
/// kernel sums see the set continue beyond the sampled window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub start: Vec<f64>,
    pub dir: Vec<f64>,
    pub density: f64,
}

impl Ray {
    /// Distance from `x` to the ray.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let v: Vec<f64> = x.iter().zip(&self.start).map(|(a, b)| a - b).collect();
        let t: f64 = v.iter().zip(&self.dir).map(|(a, b)| a * b).sum();
        if t <= 0.0 {
            v.iter().map(|a| a * a).sum::<f64>().sqrt()
        } else {
            let perp: f64 = v
                .iter()
                .zip(&self.dir)
                .map(|(a, u)| {
                    let p = a - t * u;
                    p * p
                })
                .sum();
            perp.sqrt()
        }
    }
}

/// Weighted point cloud standing in for (Γ, σ).
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    /// Row-major coordinates, `ambient_dim` per point.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub spacing: f64,
    /// Linear size of the sampled window; upper end of the resolution window is `extent / 4`.
    pub extent: f64,
    pub descriptor: String,
    /// True for a window cut out of an unbounded set (planes, graphs).
    pub patch: bool,
    /// Analytic continuation of the set outside the window, if any.
    pub completion: Vec<Ray>,
    tree: KdTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        Ball { center, radius }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AhlforsReport {
    pub ratios: Vec<(Ball, f64)>,
    pub excluded: Vec<(Ball, String)>,
    pub c_sigma: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Corkscrew {
    pub point: Vec<f64>,
    pub dist: f64,
    /// Constant C with r / C <= dist(A, Γ) <= |A - x| <= C r.
    pub constant: f64,
}

impl AhlforsReport {
    /// C_σ after dividing every ratio by `norm` (e.g. 2 for curves, the length of a unit chord).
    pub fn relative_constant(&self, norm: f64) -> f64 {
        let (lo, hi) = self.ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), (_, r)| {
            (a.min(r / norm), b.max(r / norm))
        });
        hi.max(1.0 / lo)
    }
}

impl DiscreteMeasure {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ambient_dim: usize,
        intrinsic_dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        spacing: f64,
        extent: f64,
        descriptor: impl Into<String>,
    ) -> Result<Self> {
        if intrinsic_dim == 0 || intrinsic_dim >= ambient_dim {
            return Err(Error::Parameter(format!(
                "need 1 <= d < n, got d={intrinsic_dim}, n={ambient_dim}"
            )));
        }
        if weights.is_empty() || points.len() != weights.len() * ambient_dim {
            return Err(Error::Input(format!(
                "{} coordinates do not match {} weights in dimension {}",
                points.len(),
                weights.len(),
                ambient_dim
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Input(format!("weight {w} is not strictly positive")));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        if !(spacing > 0.0) || !(extent > 0.0) {
            return Err(Error::Parameter("spacing and extent must be positive".into()));
        }
        let tree = KdTree::new(&points, ambient_dim);
        Ok(DiscreteMeasure {
            ambient_dim,
            intrinsic_dim,
            points,
            weights,
            spacing,
            extent,
            descriptor: descriptor.into(),
            patch: false,
            completion: Vec::new(),
            tree,
        })
    }

    pub fn with_completion(mut self, rays: Vec<Ray>) -> Self {
        self.completion = rays;
        self
    }

    pub fn without_completion(mut self) -> Self {
        self.completion.clear();
        self
    }

    pub fn as_patch(mut self, patch: bool) -> Self {
        self.patch = patch;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.ambient_dim..(i + 1) * self.ambient_dim]
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    /// Total mass with compensated summation.
    pub fn total_mass(&self) -> f64 {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &w in &self.weights {
            let t = sum + w;
            comp += if sum.abs() >= w.abs() {
                (sum - t) + w
            } else {
                (w - t) + sum
            };
            sum = t;
        }
        sum + comp
    }

    /// σ(B(center, r)) over the sampled support (the completion is not counted).
    ///
    /// Points lying on the sphere itself (to relative 1e-9) count with half weight,
    /// which removes the ±1 point bias of lattice samples centered at a lattice point.
    pub fn mass_in_ball(&self, center: &[f64], r: f64) -> f64 {
        let mut m = 0.0;
        let inner = (r * (1.0 - 1e-9)).powi(2);
        self.tree.for_each_within(center, r * (1.0 + 1e-9), |i, d2| {
            m += if d2 < inner {
                self.weights[i]
            } else {
                0.5 * self.weights[i]
            };
        });
        m
    }

    /// Indices of support points in the closed ball.
    pub fn indices_in_ball(&self, center: &[f64], r: f64) -> Vec<usize> {
        self.tree.within(center, r)
    }

    /// Nearest support point: (index, distance).
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let (i, d2) = self.tree.nearest(x).expect("measure is never empty");
        (i, d2.sqrt())
    }

    /// Distance to the sampled support only.
    pub fn dist_to_support(&self, x: &[f64]) -> f64 {
        self.nearest(x).1
    }

    /// Distance to Γ, including the analytic completion.
    pub fn dist_to_gamma(&self, x: &[f64]) -> f64 {
        self.completion
            .iter()
            .map(|r| r.distance(x))
            .fold(self.dist_to_support(x), f64::min)
    }

    /// Lower and upper radius of the resolution window.
    pub fn window(&self) -> (f64, f64) {
        (4.0 * self.spacing, self.extent / 4.0)
    }

    pub fn in_window(&self, r: f64) -> bool {
        let (lo, hi) = self.window();
        r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12)
    }

    /// True when B(x, r) stays inside the sampled window of a patch.
    pub fn is_interior(&self, x: &[f64], r: f64) -> bool {
        if !self.patch {
            return true;
        }
        let half = self.extent;
        x[..self.intrinsic_dim]
            .iter()
            .all(|v| v.abs() + r <= half * (1.0 + 1e-12))
    }

    /// Snaps a ball center to the nearest support point.
    pub fn snap(&self, ball: &Ball) -> Ball {
        let (i, _) = self.nearest(&ball.center);
        Ball::new(self.point(i).to_vec(), ball.radius)
    }

    /// Checks that the ball center lies on Γ up to the spacing tolerance.
    pub fn check_center(&self, ball: &Ball) -> Result<()> {
        let d = self.dist_to_support(&ball.center);
        if d > self.spacing * (1.0 + 1e-9) {
            return Err(Error::Precondition(format!(
                "ball center is {d:e} from the support (spacing {:e})",
                self.spacing
            )));
        }
        Ok(())
    }

    /// Scales the whole set by `lambda`: points, spacing and extent by λ, weights by λ^d.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        let wscale = lambda.powi(self.intrinsic_dim as i32);
        let m = DiscreteMeasure::new(
            self.ambient_dim,
            self.intrinsic_dim,
            self.points.iter().map(|p| p * lambda).collect(),
            self.weights.iter().map(|w| w * wscale).collect(),
            self.spacing * lambda,
            self.extent * lambda,
            format!("{} scaled by {lambda}", self.descriptor),
        )?;
        let rays = self
            .completion
            .iter()
            .map(|r| Ray {
                start: r.start.iter().map(|s| s * lambda).collect(),
                dir: r.dir.clone(),
                density: r.density,
            })
            .collect();
        Ok(m.with_completion(rays).as_patch(self.patch))
    }

    /// Restriction to the closed ball, as plain (points, weights).
    pub fn restrict(&self, center: &[f64], r: f64) -> (Vec<f64>, Vec<f64>) {
        let idx = self.indices_in_ball(center, r);
        let mut pts = Vec::with_capacity(idx.len() * self.ambient_dim);
        let mut w = Vec::with_capacity(idx.len());
        for i in idx {
            pts.extend_from_slice(self.point(i));
            w.push(self.weights[i]);
        }
        (pts, w)
    }

    /// Writes the columnar text format: header `n d N spacing`, then one row per point.
    ///
    /// A leading `#` line records extent, patch flag, completion and descriptor.
    pub fn write_columnar<W: Write>(&self, mut out: W) -> Result<()> {
        let meta = serde_json::json!({
            "extent": self.extent,
            "patch": self.patch,
            "completion": self.completion,
            "descriptor": self.descriptor,
        });
        writeln!(out, "# {meta}")?;
        writeln!(
            out,
            "{} {} {} {:.16e}",
            self.ambient_dim,
            self.intrinsic_dim,
            self.len(),
            self.spacing
        )?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            for c in self.point(i) {
                line.push_str(&format!("{c:.16e} "));
            }
            line.push_str(&format!("{:.16e}", self.weights[i]));
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_columnar<R: BufRead>(input: R) -> Result<Self> {
        let mut meta: Option<serde_json::Value> = None;
        let mut header: Option<(usize, usize, usize, f64)> = None;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if header.is_none() {
                    meta = serde_json::from_str(rest.trim()).ok();
                }
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 1));
            match header {
                None => {
                    if fields.len() != 4 {
                        return Err(bad("header must be `n d N spacing`"));
                    }
                    let n = fields[0].parse().map_err(|_| bad("bad n"))?;
                    let d = fields[1].parse().map_err(|_| bad("bad d"))?;
                    let count = fields[2].parse().map_err(|_| bad("bad N"))?;
                    let s = fields[3].parse().map_err(|_| bad("bad spacing"))?;
                    header = Some((n, d, count, s));
                }
                Some((n, _, _, _)) => {
                    if fields.len() != n + 1 {
                        return Err(bad("expected n coordinates and a weight"));
                    }
                    for (k, f) in fields.iter().enumerate() {
                        let v: f64 = f.parse().map_err(|_| bad("bad number"))?;
                        if k < n {
                            points.push(v);
                        } else {
                            weights.push(v);
                        }
                    }
                }
            }
        }
        let (n, d, count, spacing) = header.ok_or_else(|| Error::Format("missing header".into()))?;
        if weights.len() != count {
            return Err(Error::Format(format!(
                "header announces {count} points, found {}",
                weights.len()
            )));
        }
        let meta = meta.unwrap_or(serde_json::Value::Null);
        let extent = meta["extent"].as_f64().unwrap_or_else(|| {
            // fall back to half the largest side of the bounding box
            let mut best: f64 = 0.0;
            for k in 0..n {
                let (lo, hi) = points
                    .iter()
                    .skip(k)
                    .step_by(n)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                best = best.max(hi - lo);
            }
            (0.5 * best).max(spacing)
        });
        let descriptor = meta["descriptor"].as_str().unwrap_or("columnar file").to_string();
        let patch = meta["patch"].as_bool().unwrap_or(false);
        let completion: Vec<Ray> = serde_json::from_value(meta["completion"].clone()).unwrap_or_default();
        Ok(
            DiscreteMeasure::new(n, d, points, weights, spacing, extent, descriptor)?
                .with_completion(completion)
                .as_patch(patch),
        )
    }
}

/// Cell-centered grid of M^d base points covering [-extent, extent]^d.
fn base_grid(d: usize, extent: f64, spacing: f64) -> Result<(Vec<Vec<f64>>, f64)> {
    if !(spacing > 0.0) || extent < 16.0 * spacing * (1.0 - 1e-12) {
        return Err(Error::Parameter(format!(
            "need spacing > 0 and extent >= 16 spacing (extent {extent}, spacing {spacing})"
        )));
    }
    let m = (2.0 * extent / spacing).round();
    if ((m * spacing) - 2.0 * extent).abs() > 1e-6 * 2.0 * extent {
        return Err(Error::Parameter(format!(
            "2·extent = {} is not an integer multiple of spacing {spacing}",
            2.0 * extent
        )));
    }
    let m = m as usize;
    let step = 2.0 * extent / m as f64;
    let total = m
        .checked_pow(d as u32)
        .filter(|t| *t <= 20_000_000)
        .ok_or_else(|| Error::Parameter(format!("grid with {m}^{d} points is too large")))?;
    let coord = |j: usize| -extent + (j as f64 + 0.5) * step;
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        out.push(idx.iter().map(|&j| coord(j)).collect());
        for slot in idx.iter_mut().rev() {
            *slot += 1;
            if *slot < m {
                break;
            }
            *slot = 0;
        }
    }
    Ok((out, step))
}

/// Uniform grid on the coordinate d-plane inside [-extent, extent]^d, weights spacing^d.
///
/// For d = 1 the line is continued analytically beyond the window.
pub fn make_plane_set(n: usize, d: usize, extent: f64, spacing: f64) -> Result<DiscreteMeasure> {
    make_lipschitz_graph(n, d, &|_: &[f64]| vec![0.0; n - d], 0.0, extent, spacing).map(|mut m| {
        m.descriptor = format!("plane n={n} d={d} extent={extent} spacing={spacing}");
        m
    })
}

/// Graph of φ: ℝ^d → ℝ^{n-d} sampled over a uniform base grid, weights spacing^d.
pub fn make_lipschitz_graph(
    n: usize,
    d: usize,
    phi: &dyn Fn(&[f64]) -> Vec<f64>,
    lambda: f64,
    extent: f64,
    spacing: f64,
) -> Result<DiscreteMeasure> {
    if d == 0 || d >= n {
        return Err(Error::Parameter(format!("need 1 <= d < n, got d={d}, n={n}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Parameter("Lipschitz constant must be nonnegative".into()));
    }
    let (base, step) = base_grid(d, extent, spacing)?;
    let mut points = Vec::with_capacity(base.len() * n);
    let mut values = Vec::with_capacity(base.len());
    for x in &base {
        let y = phi(x);
        if y.len() != n - d {
            return Err(Error::Input(format!(
                "graph function returned {} values, expected {}",
                y.len(),
                n - d
            )));
        }
        points.extend_from_slice(x);
        points.extend_from_slice(&y);
        values.push(y);
    }
    // spot-check the Lipschitz bound on a deterministic family of pairs
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let count = base.len();
    let pairs = 4000.min(count * count);
    for k in 0..pairs {
        let i = if k < count.min(2000) {
            k
        } else {
            rng.gen_range(0..count)
        };
        let j = if k < count.min(2000) {
            (i + 1) % count
        } else {
            rng.gen_range(0..count)
        };
        if i == j {
            continue;
        }
        let dx = dist2(&base[i], &base[j]).sqrt();
        let dy = dist2(&values[i], &values[j]).sqrt();
        if dy > lambda * dx * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Input(format!(
                "graph function violates the Lipschitz bound {lambda}: slope {} between samples {i} and {j}",
                dy / dx
            )));
        }
    }
    let weights = vec![step.powi(d as i32); count];
    let mut m = DiscreteMeasure::new(
        n,
        d,
        points,
        weights,
        step,
        extent,
        format!("lipschitz graph n={n} d={d} lambda={lambda} extent={extent} spacing={step}"),
    )?
    .as_patch(true);
    if d == 1 {
        let mut rays = Vec::new();
        for sign in [-1.0, 1.0] {
            let base_end = [sign * extent];
            let mut start = vec![sign * extent];
            start.extend(phi(&base_end));
            let mut dir = vec![0.0; n];
            dir[0] = sign;
            rays.push(Ray {
                start,
                dir,
                density: 1.0,
            });
        }
        m = m.with_completion(rays);
    }
    Ok(m)
}

/// Sawtooth of slope ±λ and given period in the first normal coordinate.
pub fn sawtooth(lambda: f64, period: f64, codim: usize) -> impl Fn(&[f64]) -> Vec<f64> {
    move |x: &[f64]| {
        let t = x[0] / period;
        let frac = t - t.floor();
        let tri = frac.min(1.0 - frac) * period;
        let mut out = vec![0.0; codim];
        out[0] = lambda * tri;
        out
    }
}

/// Four-corner Cantor set with contraction 1/4 at level m, in the plane x₃ = 0 of ℝ³.
pub fn make_cantor_set(m: usize) -> Result<DiscreteMeasure> {
    if !(1..=10).contains(&m) {
        return Err(Error::Parameter(format!("Cantor level must be in 1..=10, got {m}")));
    }
    let count = 1usize << (2 * m);
    let side = 0.25f64.powi(m as i32);
    let mut points = Vec::with_capacity(3 * count);
    for code in 0..count {
        let mut xy = [0.5 * side, 0.5 * side];
        for j in 0..m {
            let digit = (code >> (2 * (m - 1 - j))) & 3;
            let scale = 3.0 * 0.25f64.powi(j as i32 + 1);
            xy[0] += scale * (digit & 1) as f64;
            xy[1] += scale * (digit >> 1) as f64;
        }
        points.extend_from_slice(&[xy[0], xy[1], 0.0]);
    }
    DiscreteMeasure::new(
        3,
        1,
        points,
        vec![side; count],
        3.0 * side,
        std::f64::consts::SQRT_2,
        format!("four-corner cantor set level {m}"),
    )
}

/// Ratios σ(B)/r^d over the admissible balls and the resulting C_σ estimate.
pub fn ahlfors_constant(sigma: &DiscreteMeasure, balls: &[Ball], bound: f64) -> AhlforsReport {
    let d = sigma.intrinsic_dim as i32;
    let mut ratios = Vec::new();
    let mut excluded = Vec::new();
    for b in balls {
        if !sigma.in_window(b.radius) {
            let (lo, hi) = sigma.window();
            excluded.push((b.clone(), format!("radius {} outside window [{lo}, {hi}]", b.radius)));
            continue;
        }
        let ratio = sigma.mass_in_ball(&b.center, b.radius) / b.radius.powi(d);
        ratios.push((b.clone(), ratio));
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (_, r) in &ratios {
        lo = lo.min(*r);
        hi = hi.max(*r);
    }
    let c_sigma = if ratios.is_empty() { f64::NAN } else { hi.max(1.0 / lo) };
    AhlforsReport {
        ratios,
        excluded,
        c_sigma,
        bound,
        pass: c_sigma.is_finite() && c_sigma <= bound,
    }
}

/// Random admissible balls: centers on the support, radii dyadic inside the window,
/// balls kept inside the sampled window of a patch.
pub fn sample_balls(sigma: &DiscreteMeasure, count: usize, seed: u64) -> Vec<Ball> {
    let (lo, hi) = sigma.window();
    let mut radii = Vec::new();
    let mut r = hi;
    while r >= lo {
        radii.push(r);
        r *= 0.5;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let Some(&r) = radii.choose(&mut rng) else { break };
        let i = rng.gen_range(0..sigma.len());
        let c = sigma.point(i);
        if sigma.is_interior(c, r) {
            out.push(Ball::new(c.to_vec(), r));
        }
    }
    out
}

/// Grid point in the ball farthest from Γ, on a lattice of step `grid_step` anchored at the center.
pub fn corkscrew_point(sigma: &DiscreteMeasure, ball: &Ball, grid_step: f64) -> Result<Corkscrew> {
    let r = ball.radius;
    if !(grid_step > 0.0) || r < 8.0 * grid_step * (1.0 - 1e-12) {
        return Err(Error::Parameter(format!(
            "corkscrew needs radius >= 8 grid steps (r={r}, step={grid_step})"
        )));
    }
    let n = sigma.ambient_dim;
    let k = (r / grid_step + 1e-9).floor() as i64;
    let mut idx = vec![-k; n];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut cand = vec![0.0; n];
    loop {
        let norm2: i64 = idx.iter().map(|v| v * v).sum();
        if (norm2 as f64) * grid_step * grid_step <= r * r * (1.0 + 1e-12) {
            for a in 0..n {
                cand[a] = ball.center[a] + idx[a] as f64 * grid_step;
            }
            let dist = sigma.dist_to_gamma(&cand);
            // near-ties keep the first candidate so the choice is stable under scaling
            if best.as_ref().is_none_or(|(_, bd)| dist > *bd * (1.0 + 1e-9)) {
                best = Some((cand.clone(), dist));
            }
        }
        let mut a = n;
        loop {
            if a == 0 {
                break;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] <= k {
                break;
            }
            idx[a] = -k;
            if a == 0 {
                a = usize::MAX;
                break;
            }
        }
        if a == usize::MAX {
            break;
        }
    }
    let (point, dist) = best.expect("the ball center itself is a candidate");
    if dist < grid_step {
        return Err(Error::Resolution(format!(
            "no corkscrew candidate at distance >= grid step {grid_step} from the set"
        )));
    }
    Ok(Corkscrew {
        point,
        dist,
        constant: r / dist,
    })
}
