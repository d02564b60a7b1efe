//! Carleson norms of functions on Ω, cones and non-tangential maximal
//! functions, the Carleson embedding check, and the cutoff φ_{B,ε} with its
//! sets E₁, E₂, E₃.

use crate::error::{Error, Result};
use crate::geometry::{Ball, DiscreteMeasure};
use crate::grid::{CellKind, Grid, GridField};
use serde::Serialize;
use std::f64::consts::PI;

/// Cones γ(x) = {X : |X - x| <= aperture · dist(X, Γ)}, optionally cut to a ball.
#[derive(Debug, Clone, Serialize)]
pub struct ConeFamily {
    pub aperture: f64,
    pub ball: Option<Ball>,
}

impl ConeFamily {
    pub fn new(aperture: f64) -> Result<Self> {
        if !(aperture > 1.0) {
            return Err(Error::Parameter(format!("cone aperture must exceed 1, got {aperture}")));
        }
        Ok(ConeFamily { aperture, ball: None })
    }

    pub fn truncated(mut self, ball: Ball) -> Self {
        self.ball = Some(ball);
        self
    }

    fn admits(&self, x: &[f64]) -> bool {
        match &self.ball {
            Some(b) => dist(x, &b.center) < b.radius,
            None => true,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// |S^{k-1}|.
fn sphere_area(k: usize) -> f64 {
    2.0 * PI.powf(k as f64 / 2.0) / statrs::function::gamma::gamma(k as f64 / 2.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct NtMax {
    pub value: f64,
    /// Grid cells found in the cone.
    pub cells: usize,
    pub empty: bool,
}

/// N(u)(x): max of |u| over non-collar cells whose centers lie in the cone at x.
pub fn ntmax(u: &GridField, sigma: &DiscreteMeasure, x: &[f64], cones: &ConeFamily) -> Result<NtMax> {
    let h = u.grid.h;
    let dx = sigma.dist_to_gamma(x);
    if dx > sigma.spacing.max(h) * (1.0 + 1e-9) {
        return Err(Error::Precondition(format!("vertex lies {dx:e} away from the set")));
    }
    let mut c = vec![0.0; u.grid.dim()];
    let mut value = 0.0f64;
    let mut cells = 0;
    for i in 0..u.grid.len() {
        if u.mask[i] == CellKind::Collar {
            continue;
        }
        u.grid.center_into(i, &mut c);
        if !cones.admits(&c) {
            continue;
        }
        if dist(&c, x) <= cones.aperture * sigma.dist_to_gamma(&c) {
            value = value.max(u.values[i].abs());
            cells += 1;
        }
    }
    Ok(NtMax {
        value,
        cells,
        empty: cells == 0,
    })
}

#[derive(Debug, Clone)]
pub struct NtField {
    /// N(u) at every support point; `None` when the cone holds no grid cell.
    pub values: Vec<Option<f64>>,
}

/// N(u) at every support point at once: each cell raises all vertices within
/// aperture · dist(X, Γ) of it.
pub fn ntmax_field(u: &GridField, sigma: &DiscreteMeasure, cones: &ConeFamily) -> Result<NtField> {
    let tree = sigma.tree();
    let mut buf = tree.max_buffer();
    let mut c = vec![0.0; u.grid.dim()];
    for i in 0..u.grid.len() {
        if u.mask[i] == CellKind::Collar {
            continue;
        }
        u.grid.center_into(i, &mut c);
        if !cones.admits(&c) {
            continue;
        }
        let reach = cones.aperture * sigma.dist_to_gamma(&c);
        tree.max_within(&c, reach, u.values[i].abs(), &mut buf);
    }
    let values = tree
        .resolve_max(&buf)
        .into_iter()
        .map(|v| if v == f64::NEG_INFINITY { None } else { Some(v) })
        .collect();
    Ok(NtField { values })
}

#[derive(Debug, Clone, Serialize)]
pub struct BallCarleson {
    pub ball: Ball,
    /// ∫_B |f|^p dist^{d-n} / σ(B) over cells outside the shell.
    pub value: f64,
    pub mass: f64,
    pub cells: usize,
    /// Cells where the evaluator failed.
    pub skipped: usize,
    /// Cells inside the excluded shell dist < shell · h.
    pub shell_cells: usize,
    /// Growth of the value per unit of log(1/h) carried by the shell: |S^{n-d-1}| times
    /// the mean of |f|^p over shell cells. Integrals near Γ diverge like log(1/h) at this rate.
    pub shell_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlesonEstimate {
    pub per_ball: Vec<BallCarleson>,
    pub supremum: f64,
    pub h: f64,
    pub squared: bool,
    pub shell_rate: f64,
}

/// Default width of the excluded shell around Γ, in grid steps.
pub const SHELL: f64 = 2.0;

/// Carleson norm estimate of f over the given balls: ‖·‖_CM when `squared`, ‖·‖_CM1 otherwise.
pub fn carleson_norm(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    sigma: &DiscreteMeasure,
    balls: &[Ball],
    h: f64,
    squared: bool,
) -> Result<CarlesonEstimate> {
    carleson_norm_shell(f, sigma, balls, h, squared, SHELL)
}

/// As [`carleson_norm`], with cells closer than `shell` · h to Γ excluded.
pub fn carleson_norm_shell(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    sigma: &DiscreteMeasure,
    balls: &[Ball],
    h: f64,
    squared: bool,
    shell: f64,
) -> Result<CarlesonEstimate> {
    if !(shell > 0.0) {
        return Err(Error::Parameter(format!("shell width must be positive, got {shell}")));
    }
    if balls.is_empty() {
        return Err(Error::Parameter("no balls given".into()));
    }
    let n = sigma.ambient_dim;
    let d = sigma.intrinsic_dim;
    let area = sphere_area(n - d);
    let hn = h.powi(n as i32);
    let mut per_ball = Vec::with_capacity(balls.len());
    for ball in balls {
        let r = ball.radius;
        if h > r / 32.0 * (1.0 + 1e-9) {
            return Err(Error::Precondition(format!("h = {h:e} exceeds r/32 for radius {r:e}")));
        }
        let grid = Grid::centered(&ball.center, r, h)?;
        let mut c = vec![0.0; n];
        let (mut sum, mut cells, mut skipped, mut shell_cells, mut shell_sum) = (0.0, 0, 0, 0, 0.0);
        for i in 0..grid.len() {
            grid.center_into(i, &mut c);
            if dist(&c, &ball.center) >= r {
                continue;
            }
            let t = sigma.dist_to_gamma(&c);
            let v = match f(&c) {
                Ok(v) if v.is_finite() => v.abs(),
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            let v = if squared { v * v } else { v };
            if t < shell * h {
                shell_cells += 1;
                shell_sum += v;
                continue;
            }
            cells += 1;
            sum += v * t.powi(d as i32 - n as i32) * hn;
        }
        let mass = sigma.mass_in_ball(&ball.center, r);
        if !(mass > 0.0) {
            return Err(Error::Degenerate(format!("ball at {:?} carries no mass", ball.center)));
        }
        per_ball.push(BallCarleson {
            ball: ball.clone(),
            value: sum / mass,
            mass,
            cells,
            skipped,
            shell_cells,
            shell_rate: if shell_cells > 0 {
                area * shell_sum / shell_cells as f64
            } else {
                0.0
            },
        });
    }
    let supremum = per_ball.iter().fold(0.0f64, |m, b| m.max(b.value));
    let shell_rate = per_ball.iter().fold(0.0f64, |m, b| m.max(b.shell_rate));
    Ok(CarlesonEstimate {
        per_ball,
        supremum,
        h,
        squared,
        shell_rate,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Embedding {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub cm1: f64,
    /// ∫_Γ N(u) dσ over the support points in the ball.
    pub n_integral: f64,
}

/// lhs = ∫_B u f dist^{d-n}, rhs = ‖f‖_CM1 ∫_Γ N(u) dσ with the CM1 norm estimated on `cm_balls`.
pub fn embedding_check(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    u: &dyn Fn(&[f64]) -> f64,
    sigma: &DiscreteMeasure,
    ball: &Ball,
    h: f64,
    cm_balls: &[Ball],
) -> Result<Embedding> {
    let n = sigma.ambient_dim;
    let d = sigma.intrinsic_dim;
    let r = ball.radius;
    let grid = Grid::centered(&ball.center, r, h)?;
    let hn = h.powi(n as i32);
    let mut field = GridField::new(grid.clone(), vec![CellKind::Interior; grid.len()]);
    let mut c = vec![0.0; n];
    let mut lhs = 0.0;
    for i in 0..grid.len() {
        grid.center_into(i, &mut c);
        let t = sigma.dist_to_gamma(&c);
        if t < SHELL * h {
            field.mask[i] = CellKind::Collar;
            continue;
        }
        let uv = u(&c);
        field.values[i] = uv;
        if dist(&c, &ball.center) >= r {
            continue;
        }
        if let Ok(fv) = f(&c) {
            if fv.is_finite() {
                lhs += uv * fv * t.powi(d as i32 - n as i32) * hn;
            }
        }
    }
    let cm1 = carleson_norm(f, sigma, cm_balls, h, false)?.supremum;
    let cones = ConeFamily::new(2.0)?.truncated(ball.clone());
    let nt = ntmax_field(&field, sigma, &cones)?;
    let n_integral: f64 = sigma
        .indices_in_ball(&ball.center, r)
        .into_iter()
        .map(|k| nt.values[k].unwrap_or(0.0) * sigma.weights[k])
        .sum();
    let rhs = cm1 * n_integral;
    if rhs == 0.0 && lhs > 0.0 {
        return Err(Error::State(format!(
            "inconsistent Carleson estimate: lhs {lhs:e} with vanishing right side"
        )));
    }
    Ok(Embedding {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
        cm1,
        n_integral,
    })
}

/// Piecewise-linear profile: 1 on [-1, 1], 0 outside [-3/2, 3/2], slope 2.
pub fn psi(t: f64) -> f64 {
    (3.0 - 2.0 * t.abs()).clamp(0.0, 1.0)
}

/// φ_{B,ε} from the two distances.
pub fn cutoff_from(dist_gamma: f64, dist_ball: f64, r: f64, eps: f64) -> f64 {
    if dist_gamma <= 0.0 {
        return 0.0;
    }
    psi(dist_ball / (10.0 * dist_gamma)) * psi(2.0 * dist_ball / r) * psi(eps / dist_gamma)
}

fn dist_to_ball(x: &[f64], ball: &Ball) -> f64 {
    (dist(x, &ball.center) - ball.radius).max(0.0)
}

pub fn cutoff_phi(sigma: &DiscreteMeasure, ball: &Ball, eps: f64, x: &[f64]) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {eps}")));
    }
    Ok(cutoff_from(
        sigma.dist_to_gamma(x),
        dist_to_ball(x, ball),
        ball.radius,
        eps,
    ))
}

/// Membership of X in E₁, E₂, E₃ from the two distances.
pub fn e_sets_from(dist_gamma: f64, dist_ball: f64, r: f64, eps: f64) -> [bool; 3] {
    let in_2b = dist_ball < r;
    [
        in_2b && 10.0 * dist_gamma <= dist_ball && dist_ball <= 20.0 * dist_gamma,
        in_2b && r / 40.0 <= dist_gamma && dist_gamma <= 2.0 * r,
        in_2b && eps / 2.0 <= dist_gamma && dist_gamma <= eps,
    ]
}

pub fn e_sets_indicator(sigma: &DiscreteMeasure, ball: &Ball, eps: f64, x: &[f64]) -> Result<[bool; 3]> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {eps}")));
    }
    Ok(e_sets_from(
        sigma.dist_to_gamma(x),
        dist_to_ball(x, ball),
        ball.radius,
        eps,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub points: usize,
    /// Largest |∇φ| · dist / (number of E-sets containing X), or |∇φ| · dist where that number is 0.
    pub worst_ratio: f64,
    /// Points with nonzero gradient outside every E-set.
    pub outside: usize,
}

/// Central-difference |∇φ_{B,ε}| against 100 / dist · (1_{E₁} + 1_{E₂} + 1_{E₃}).
pub fn gradient_bound_check(
    sigma: &DiscreteMeasure,
    ball: &Ball,
    eps: f64,
    points: &[Vec<f64>],
    step: f64,
) -> Result<GradientCheck> {
    let mut worst = 0.0f64;
    let mut outside = 0;
    for x in points {
        let t = sigma.dist_to_gamma(x);
        if t <= 2.0 * step {
            continue;
        }
        let mut g2 = 0.0;
        let mut y = x.clone();
        for a in 0..x.len() {
            y[a] = x[a] + step;
            let up = cutoff_phi(sigma, ball, eps, &y)?;
            y[a] = x[a] - step;
            let down = cutoff_phi(sigma, ball, eps, &y)?;
            y[a] = x[a];
            g2 += ((up - down) / (2.0 * step)).powi(2);
        }
        let grad = g2.sqrt();
        let count = e_sets_indicator(sigma, ball, eps, x)?.iter().filter(|e| **e).count();
        if count == 0 {
            if grad > 0.0 {
                outside += 1;
            }
            worst = worst.max(grad * t);
        } else {
            worst = worst.max(grad * t / count as f64);
        }
    }
    Ok(GradientCheck {
        points: points.len(),
        worst_ratio: worst,
        outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_plane_set;
    use proptest::prelude::*;

    fn line() -> DiscreteMeasure {
        make_plane_set(3, 1, 1.0, 1.0 / 256.0).unwrap()
    }

    fn origin_ball(s: &DiscreteMeasure, r: f64) -> Ball {
        Ball::new(s.point(s.nearest(&[0.0; 3]).0).to_vec(), r)
    }

    // ∫ over B minus the tube of radius a of dist^{-2}, divided by the length 2r
    fn line_oracle(r: f64, a: f64) -> f64 {
        let s = (r * r - a * a).sqrt();
        4.0 * PI * (r * ((r + s) / a).ln() - s) / (2.0 * r)
    }

    #[test]
    fn zero_function_has_zero_norm() {
        let s = line();
        let b = origin_ball(&s, 0.25);
        let est = carleson_norm(&|_| Ok(0.0), &s, &[b], 0.25 / 32.0, true).unwrap();
        assert_eq!(est.supremum, 0.0);
    }

    #[test]
    fn constant_function_matches_the_radial_integral() {
        let s = line();
        let r = 0.25;
        let b = origin_ball(&s, r);
        let mut prev = 0.0;
        for k in [32.0, 64.0] {
            let h = r / k;
            let est = carleson_norm(&|_| Ok(1.0), &s, &[b.clone()], h, false).unwrap();
            let exact = line_oracle(r, 2.0 * h);
            assert!((est.supremum / exact - 1.0).abs() < 0.03, "{} vs {exact}", est.supremum);
            assert!((est.shell_rate - 2.0 * PI).abs() < 1e-9);
            if prev > 0.0 {
                assert!(est.supremum - prev >= 0.5 * 2f64.ln());
            }
            prev = est.supremum;
        }
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let s = line();
        let b = origin_ball(&s, 0.25);
        assert!(matches!(
            carleson_norm(&|_| Ok(1.0), &s, &[b], 0.25 / 16.0, false),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn norms_are_homogeneous() {
        let s = line();
        let b = origin_ball(&s, 0.2);
        let h = 0.2 / 32.0;
        let f = |x: &[f64]| Ok(x[0].sin() + 2.0);
        let g = |x: &[f64]| Ok(-3.0 * (x[0].sin() + 2.0));
        for squared in [false, true] {
            let a = carleson_norm(&f, &s, &[b.clone()], h, squared).unwrap().supremum;
            let c = carleson_norm(&g, &s, &[b.clone()], h, squared).unwrap().supremum;
            let factor = if squared { 9.0 } else { 3.0 };
            assert!((c / (factor * a) - 1.0).abs() < 1e-12);
        }
    }

    fn test_field(s: &DiscreteMeasure, h: f64) -> GridField {
        let grid = Grid::centered(&[0.0; 3], 0.25, h).unwrap();
        let mut f = GridField::new(grid.clone(), vec![CellKind::Interior; grid.len()]);
        for i in 0..grid.len() {
            let c = grid.center(i);
            if s.dist_to_gamma(&c) < h {
                f.mask[i] = CellKind::Collar;
            }
            f.values[i] = (7.0 * c[0]).sin() + c[1] * c[2] * 10.0;
        }
        f
    }

    #[test]
    fn field_and_pointwise_maxima_agree() {
        let s = line();
        let u = test_field(&s, 1.0 / 32.0);
        let cones = ConeFamily::new(2.0).unwrap().truncated(Ball::new(vec![0.0; 3], 0.2));
        let field = ntmax_field(&u, &s, &cones).unwrap();
        for k in (0..s.len()).step_by(17) {
            let direct = ntmax(&u, &s, s.point(k), &cones).unwrap();
            match field.values[k] {
                Some(v) => assert_eq!(v, direct.value),
                None => assert!(direct.empty),
            }
        }
        assert!(ntmax(&u, &s, &[0.0, 0.0, 0.1], &cones).is_err());
        assert!(ConeFamily::new(1.0).is_err());
    }

    #[test]
    fn nontangential_maximum_of_constants_and_distance() {
        let s = line();
        let mut u = test_field(&s, 1.0 / 32.0);
        let r = 0.2;
        let cones = ConeFamily::new(2.0).unwrap().truncated(Ball::new(vec![0.0; 3], r));
        u.values.iter_mut().for_each(|v| *v = -2.5);
        let field = ntmax_field(&u, &s, &cones).unwrap();
        let inner = s.indices_in_ball(&[0.0; 3], r / 2.0);
        assert!(inner.iter().all(|&k| field.values[k] == Some(2.5)));
        for i in 0..u.grid.len() {
            u.values[i] = s.dist_to_gamma(&u.grid.center(i));
        }
        let field = ntmax_field(&u, &s, &cones).unwrap();
        assert!(field.values.iter().flatten().all(|v| *v <= 2.0 * r));
    }

    #[test]
    fn embedding_with_zero_data() {
        let s = line();
        let b = origin_ball(&s, 0.2);
        let h = 0.2 / 32.0;
        let e = embedding_check(&|_| Ok(1.0), &|_| 0.0, &s, &b, h, &[b.clone()]).unwrap();
        assert_eq!(e.lhs, 0.0);
        assert_eq!(e.ratio, 0.0);
        let ind = |x: &[f64]| e_sets_indicator(&s, &b, 0.01, x).map(|e| if e[1] { 1.0 } else { 0.0 });
        let e = embedding_check(&ind, &|_| 1.0, &s, &b, h, &[b.clone()]).unwrap();
        assert!(e.lhs > 0.0 && e.ratio > 0.0 && e.ratio <= 1.0 + 1e-9, "{e:?}");
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(psi(0.0), 1.0);
        assert_eq!(psi(1.0), 1.0);
        assert_eq!(psi(1.25), 0.5);
        assert_eq!(psi(-1.5), 0.0);
        // inside the ball, far from ε
        assert_eq!(cutoff_from(0.1, 0.0, 1.0, 0.01), 1.0);
        // too close to Γ
        assert_eq!(cutoff_from(0.004, 0.0, 1.0, 0.01), 0.0);
        // far outside the ball
        assert_eq!(cutoff_from(0.5, 0.8, 1.0, 0.01), 0.0);
        assert_eq!(e_sets_from(0.1, 1.5, 1.0, 0.01), [false, false, false]);
        assert_eq!(e_sets_from(0.05, 0.6, 1.0, 0.01), [true, true, false]);
        assert_eq!(e_sets_from(0.008, 0.0, 1.0, 0.01), [false, false, true]);
    }

    #[test]
    fn cutoff_gradient_is_bounded_on_the_sets() {
        let s = line();
        let b = origin_ball(&s, 0.2);
        let mut pts = Vec::new();
        let mut state = 12345u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..2000 {
            pts.push(vec![0.2 * next(), 0.3 * next(), 0.3 * next()]);
        }
        let chk = gradient_bound_check(&s, &b, 0.01, &pts, 1e-7).unwrap();
        assert_eq!(chk.outside, 0);
        assert!(chk.worst_ratio <= 100.0, "{}", chk.worst_ratio);
        assert!(chk.worst_ratio > 0.0);
    }

    proptest! {
        #[test]
        fn cutoff_is_a_bump(dg in 1e-4f64..2.0, db in 0.0f64..2.0, eps in 1e-3f64..0.1) {
            let r = 1.0;
            let phi = cutoff_from(dg, db, r, eps);
            prop_assert!((0.0..=1.0).contains(&phi));
            if db == 0.0 && dg >= eps {
                prop_assert_eq!(phi, 1.0);
            }
            if db >= 0.75 * r || dg <= 2.0 * eps / 3.0 {
                prop_assert_eq!(phi, 0.0);
            }
            // the ball is centered on Γ
            if phi > 0.0 && phi < 1.0 && dg <= r + db {
                prop_assert!(e_sets_from(dg, db, r, eps).iter().any(|e| *e));
            }
        }

        #[test]
        fn maximal_function_is_monotone_and_homogeneous(scale in -3.0f64..3.0, shift in 0.0f64..1.0) {
            let s = make_plane_set(3, 1, 1.0, 1.0 / 64.0).unwrap();
            let u = test_field(&s, 1.0 / 16.0);
            let cones = ConeFamily::new(2.0).unwrap();
            let mut v = u.clone();
            v.values.iter_mut().for_each(|x| *x *= scale);
            let mut w = u.clone();
            w.values.iter_mut().for_each(|x| *x = x.abs() + shift);
            let (fu, fv, fw) = (
                ntmax_field(&u, &s, &cones).unwrap(),
                ntmax_field(&v, &s, &cones).unwrap(),
                ntmax_field(&w, &s, &cones).unwrap(),
            );
            for k in 0..s.len() {
                if let (Some(a), Some(b), Some(c)) = (fu.values[k], fv.values[k], fw.values[k]) {
                    prop_assert!((b - scale.abs() * a).abs() <= 1e-12 * (1.0 + a));
                    prop_assert!(c >= a);
                }
            }
        }
    }
}
