//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p urlab --test acceptance` runs everything; pass criterion
//! numbers after `--` to run a subset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;
use std::cell::RefCell;
use std::f64::consts::PI;
use std::time::{Duration, Instant};
use urlab::carleson::{carleson_norm, e_sets_indicator};
use urlab::elliptic::{ainfty_scatter, envelope, harmonic_measure, sn_check, SolverConfig, System};
use urlab::geometry::{make_cantor_set, make_lipschitz_graph, make_plane_set, sawtooth};
use urlab::grid::Grid;
use urlab::identities::{constant_rows, verify_identities, IdentityRow, VerifyConfig};
use urlab::wasserstein::{
    dist_xr, flat_dist, plane_plane_bound, AlphaConfig, FlatMeasure, LpConfig, PlaneCase, WeightedPoints,
};
use urlab::whitney::{
    decompose, decompose_region, ur_square_sum_stratified, AlphaCache, CensusConfig, DyadicBox, WhitneyAnalysis,
    WhitneyConfig,
};
use urlab::{Ball, DiscreteMeasure};

type Outcome = urlab::Result<(bool, String)>;

struct Check {
    pass: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check {
            pass: true,
            notes: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, note: String) {
        self.pass &= ok;
        self.notes.push(if ok { note } else { format!("{note} [fail]") });
    }

    fn done(self) -> Outcome {
        Ok((self.pass, self.notes.join("; ")))
    }
}

fn whitney_cfg(cap: usize) -> WhitneyConfig {
    WhitneyConfig {
        alpha: AlphaConfig {
            lp: LpConfig {
                cap,
                ..LpConfig::default()
            },
            ..AlphaConfig::default()
        },
        ..WhitneyConfig::default()
    }
}

fn row<'a>(rows: &'a [IdentityRow], prefix: &str) -> &'a IdentityRow {
    rows.iter()
        .find(|r| r.identity.starts_with(prefix))
        .expect("identity row")
}

fn near(s: &DiscreteMeasure, x: &[f64]) -> Vec<f64> {
    s.point(s.nearest(x).0).to_vec()
}

fn c1_constants() -> Outcome {
    let mut c = Check::new();
    for r in constant_rows()? {
        c.expect(r.pass, format!("{} max {:.1e}", r.identity, r.max_residual));
    }
    // π^{d/2} Γ(β/2) / Γ((d+β)/2)
    let mut worst = 0.0f64;
    for d in [1usize, 2] {
        for beta in [0.5, 1.0, 2.0] {
            let closed = PI.powf(d as f64 / 2.0) * gamma(beta / 2.0) / gamma((d as f64 + beta) / 2.0);
            worst = worst.max((urlab::distances::c_beta(d, beta)? / closed - 1.0).abs());
        }
    }
    c.expect(worst < 1e-8, format!("gamma closed form max {worst:.1e}"));
    c.done()
}

fn c2_gradient() -> Outcome {
    let mut c = Check::new();
    let cfg = VerifyConfig::default();
    let plane = make_plane_set(3, 1, 1.0, 1.0 / 256.0)?;
    let graph = make_lipschitz_graph(3, 1, &sawtooth(0.2, 0.25, 2), 0.2, 1.0, 1.0 / 256.0)?;
    for (name, s) in [("plane", &plane), ("graph", &graph)] {
        let rows = verify_identities(s, &cfg, false)?;
        let r = row(&rows, "grad D_beta");
        c.expect(
            r.pass && r.checks == 100,
            format!("{name} {} probes max {:.1e}", r.checks, r.max_residual),
        );
    }
    c.done()
}

fn c3_plane() -> Outcome {
    let mut c = Check::new();
    let s = make_plane_set(3, 1, 1.0, 1.0 / 256.0)?;
    let rows = verify_identities(&s, &VerifyConfig::default(), true)?;
    for r in rows.iter().filter(|r| r.identity.starts_with("plane")) {
        c.expect(
            r.pass && r.checks == 100,
            format!("{} max {:.1e}", r.identity, r.max_residual),
        );
    }
    c.done()
}

fn line(offset: Vec<f64>, dir: Vec<f64>, c: f64) -> urlab::Result<FlatMeasure> {
    FlatMeasure::spanned(offset, &[dir], c)
}

fn c4_lp() -> Outcome {
    let mut c = Check::new();
    let cfg = LpConfig::default();
    let s = make_plane_set(3, 1, 1.0, 0.01)?;
    let ball = Ball::new(s.point(100).to_vec(), 0.2);
    let w = WeightedPoints::restricted(&s, &ball);
    let zero = dist_xr(&w, &w, &ball, 1, &cfg)?.value;
    c.expect(zero < 1e-8, format!("identical {zero:.1e}"));

    // two atoms of mass m: m · min(|p - q|, dist(p, ∂B) + dist(q, ∂B)) over r^{d+1}
    let unit = Ball::new(vec![0.0; 3], 1.0);
    let mut worst = 0.0f64;
    for (p, q) in [([0.1, 0.2, 0.0], [-0.3, 0.1, 0.2]), ([0.7, 0.0, 0.0], [-0.7, 0.0, 0.0])] {
        let mut a = WeightedPoints::new(3);
        a.push(&p, 0.4);
        let mut b = WeightedPoints::new(3);
        b.push(&q, 0.4);
        let got = dist_xr(&a, &b, &unit, 1, &cfg)?.value;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pq = norm(&[p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        let expect = 0.4 * pq.min(2.0 - norm(&p) - norm(&q));
        worst = worst.max((got - expect).abs());
    }
    c.expect(worst < 1e-6, format!("two-point error {worst:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = 0.4;
    let x0 = vec![0.0; 3];
    let ball = Ball::new(x0.clone(), r);
    let (mut lo, mut hi, mut monotone) = (f64::INFINITY, 0.0f64, true);
    for _ in 0..20 {
        let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = orth(&e, &(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let slope = rng.gen_range(0.0..0.9);
        let b = rng.gen_range(0.01..0.2) * r;
        let c1 = rng.gen_range(0.6..1.4);
        let c2 = c1 * rng.gen_range(0.7..1.0);
        let p1 = line(x0.clone(), e.clone(), c1)?;
        let dir2: Vec<f64> = (0..3).map(|a| e[a] + slope * norm3(&e) * u[a]).collect();
        let mut values = Vec::new();
        for scale in [1.0, 2.0] {
            let off: Vec<f64> = u.iter().map(|v| v * b * scale).collect();
            let p2 = line(off, dir2.clone(), c2)?;
            let bound = plane_plane_bound(&p1, &p2, &ball)?;
            if bound.case != PlaneCase::Shallow {
                return Err(urlab::Error::Precondition(format!("unexpected case {:?}", bound.case)));
            }
            let lp = flat_dist(&p1, &p2, &ball, 32, &cfg)?.value;
            if scale == 1.0 {
                // the envelope center against an independently computed |a|, |b|
                let formula = c1 * (slope + b / r) + (c1 - c2);
                if (formula - bound.estimate).abs() > 1e-9 * formula {
                    return Err(urlab::Error::Degenerate(format!(
                        "estimate {} vs {formula}",
                        bound.estimate
                    )));
                }
                let q = lp / formula;
                lo = lo.min(q);
                hi = hi.max(q);
            }
            values.push(lp);
        }
        monotone &= values[1] >= values[0];
    }
    c.expect(
        lo >= 1.0 / 32.0 && hi <= 32.0,
        format!("20 pairs ratio in [{lo:.3}, {hi:.3}]"),
    );
    c.expect(monotone, "monotone in |b|".to_string());
    c.done()
}

fn norm3(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit vector along the part of `v` orthogonal to `e`.
fn orth(e: &[f64], v: &[f64]) -> Vec<f64> {
    let ee: f64 = e.iter().map(|x| x * x).sum();
    let ev: f64 = e.iter().zip(v).map(|(a, b)| a * b).sum();
    let w: Vec<f64> = v.iter().zip(e).map(|(a, b)| a - ev / ee * b).collect();
    let n = norm3(&w);
    w.iter().map(|x| x / n).collect()
}

fn c5_whitney() -> Outcome {
    let mut c = Check::new();
    for s in [make_plane_set(3, 1, 0.5, 1.0 / 128.0)?, make_cantor_set(3)?] {
        let dec = decompose(&s, &DyadicBox::around(&s), 6)?;
        let rep = dec.check_whitney_condition(&s);
        c.expect(
            rep.inner_failures == 0 && rep.outer_failures == 0,
            format!(
                "{} cubes: {} + {} violations",
                rep.cubes, rep.inner_failures, rep.outer_failures
            ),
        );
    }
    let s = make_plane_set(2, 1, 1.0, 1.0 / 512.0)?;
    let bbox = DyadicBox::around(&s);
    let k6 = decompose(&s, &bbox, 6)?
        .neighbor_counts()
        .into_iter()
        .max()
        .unwrap_or(0);
    let k8 = decompose(&s, &bbox, 8)?
        .neighbor_counts()
        .into_iter()
        .max()
        .unwrap_or(0);
    c.expect(
        k6 == k8 && k6 > 0,
        format!("neighbors {k6} at depth 6, {k8} at depth 8"),
    );

    // diam(Q) against dist(center, Γ) for cubes above the sampling scale
    let s = make_plane_set(3, 1, 0.5, 1.0 / 128.0)?;
    let dec = decompose(&s, &DyadicBox::around(&s), 7)?;
    let (lo, hi) = (1.0 / (40.0 * 3f64.sqrt()), 3f64.sqrt());
    let (mut rmin, mut rmax, mut checked) = (f64::INFINITY, 0.0f64, 0);
    for q in dec.cubes.iter().filter(|q| q.side >= s.spacing) {
        // exact distance to the x₁ axis, not to the samples
        let t = (q.center[1] * q.center[1] + q.center[2] * q.center[2]).sqrt();
        let ratio = q.diameter / t;
        rmin = rmin.min(ratio);
        rmax = rmax.max(ratio);
        checked += 1;
    }
    c.expect(
        checked > 1000 && rmin >= lo && rmax <= hi,
        format!("{checked} plane cubes with diam/dist in [{rmin:.3}, {rmax:.3}]"),
    );
    c.done()
}

fn c6_ur() -> Outcome {
    let mut c = Check::new();
    let cfg = whitney_cfg(150);
    let exact = CensusConfig {
        exact_limit: usize::MAX,
        ..CensusConfig::default()
    };
    let radii = [0.1, 0.2, 0.4];
    let mut sums = Vec::new();
    for (spacing, depth) in [(1.0 / 256.0, 12), (1.0 / 512.0, 13)] {
        let s = make_lipschitz_graph(2, 1, &sawtooth(0.2, 0.1, 1), 0.2, 2.0, spacing)?;
        let bbox = DyadicBox::around(&s);
        let x = near(&s, &[0.13, 0.0]);
        let mut cache = AlphaCache::new();
        let mut row = Vec::new();
        for r in radii {
            row.push(ur_square_sum_stratified(&s, &bbox, &x, r, 0, depth, &cfg, &exact, &mut cache)?.value);
        }
        sums.push(row);
    }
    let spread = |v: &[f64]| {
        let (a, b) = v
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        b / a
    };
    let across = spread(&sums[0]);
    c.expect(
        across <= 2.0,
        format!("graph r-spread {across:.2} ({:.3e}..)", sums[0][0]),
    );
    let depth = (0..radii.len())
        .map(|i| spread(&[sums[0][i], sums[1][i]]))
        .fold(0.0f64, f64::max);
    c.expect(depth <= 2.0, format!("graph refinement spread {depth:.2}"));

    let census = CensusConfig::default();
    let mut prev: Option<f64> = None;
    for m in [4usize, 6, 8] {
        let s = make_cantor_set(m)?;
        let bbox = DyadicBox::around(&s);
        let x = near(&s, &[0.3, 0.6, 0.0]);
        let mut cache = AlphaCache::new();
        let v = ur_square_sum_stratified(&s, &bbox, &x, 0.1, 0, 2 * m as u32 + 2, &cfg, &census, &mut cache)?.value;
        if let Some(p) = prev {
            c.expect(v >= 1.5 * p, format!("cantor m={m} grows {:.2}x", v / p));
        }
        prev = Some(v);
    }
    c.done()
}

fn c7_carleson() -> Outcome {
    let mut c = Check::new();
    let s = make_plane_set(3, 1, 1.0, 1.0 / 256.0)?;
    let r = 0.25;
    let ball = Ball::new(near(&s, &[0.0; 3]), r);
    let oracle = |a: f64| {
        let q = (r * r - a * a).sqrt();
        4.0 * PI * (r * ((r + q) / a).ln() - q) / (2.0 * r)
    };
    let mut ones = Vec::new();
    for k in [32.0, 64.0, 128.0] {
        let h = r / k;
        let v = carleson_norm(&|_| Ok(1.0), &s, std::slice::from_ref(&ball), h, false)?.supremum;
        let o = oracle(2.0 * h);
        c.expect(
            (v / o - 1.0).abs() < 0.05,
            format!("f=1 at r/{k}: {v:.3} vs radial {o:.3}"),
        );
        ones.push(v);
    }
    let growth = ones.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    c.expect(growth >= 0.5 * 2f64.ln(), format!("f=1 growth per halving {growth:.3}"));

    // E₂ of a ball with radius at least 160h so its inner edge r₀/40 is resolved
    let b0 = Ball::new(near(&s, &[0.0; 3]), 0.75);
    let f = |x: &[f64]| e_sets_indicator(&s, &b0, 0.01, x).map(|e| if e[1] { 1.0 } else { 0.0 });
    let e2: Vec<f64> = [32.0, 64.0]
        .iter()
        .map(|k| carleson_norm(&f, &s, std::slice::from_ref(&ball), r / k, false).map(|e| e.supremum))
        .collect::<urlab::Result<_>>()?;
    let q = e2[1] / e2[0];
    c.expect(q <= 1.2 && q >= 1.0 / 1.2, format!("1_E2 {:.3} -> {:.3}", e2[0], e2[1]));

    let g = make_lipschitz_graph(2, 1, &sawtooth(0.2, 0.1, 1), 0.2, 2.0, 1.0 / 512.0)?;
    let gball = Ball::new(near(&g, &[0.13, 0.0]), 0.2);
    let region = Ball::new(gball.center.clone(), 1.1 * gball.radius);
    let dec = decompose_region(&g, &DyadicBox::around(&g), 13, &region)?;
    let an = RefCell::new(WhitneyAnalysis::new(&g, dec, whitney_cfg(150))?);
    let a2 = |x: &[f64]| an.borrow_mut().a_x(x, 1.0, 1.0).map(|a| a.value);
    let mut av = Vec::new();
    for k in [32.0, 64.0] {
        let est = carleson_norm(&a2, &g, std::slice::from_ref(&gball), gball.radius / k, true)?;
        av.push((est.supremum, est.per_ball[0].skipped));
    }
    let q = av[1].0 / av[0].0;
    c.expect(
        q <= 2.0 && q >= 0.5,
        format!(
            "a^2 on graph {:.3e} -> {:.3e} (skipped {} / {})",
            av[0].0, av[1].0, av[0].1, av[1].1
        ),
    );
    c.done()
}

fn c8_harmonic() -> Outcome {
    let mut c = Check::new();
    let s = make_plane_set(3, 1, 1.0, 1.0 / 256.0)?;
    let pole = [0.0, 0.0, 0.25];
    let cfg = SolverConfig::default();
    let tol = 10.0 * cfg.tol;
    let mut halves = Vec::new();
    for h in [1.0 / 64.0, 1.0 / 128.0] {
        let grid = Grid::centered(&[0.0; 3], 0.375, h)?;
        let dims = grid.dims.clone();
        let sys = System::assemble(&s, grid, cfg)?;
        let half: Vec<bool> = (0..s.len()).map(|k| s.point(k)[0] > 0.0).collect();
        let hm = harmonic_measure(&sys, &s, &half, &pole)?;
        halves.push(hm.value);
        c.expect(dims.iter().all(|&n| n <= 96), format!("grid {dims:?}"));
        if h > 1.0 / 100.0 {
            let all = vec![true; s.len()];
            let one = harmonic_measure(&sys, &s, &all, &pole)?.value;
            c.expect((one - 1.0).abs() <= 0.05, format!("g=1 gives {one:.4}"));
            c.expect((hm.value - 0.5).abs() <= 0.05, format!("half-line {:.4}", hm.value));

            let e = |lo: f64, hi: f64| -> Vec<bool> {
                (0..s.len())
                    .map(|k| s.point(k)[0] > lo && s.point(k)[0] <= hi)
                    .collect()
            };
            let solve = |m: &[bool]| sys.solve(&|k| if m[k] { 1.0 } else { 0.0 });
            let a = solve(&e(0.1, 9.0))?;
            let b = solve(&e(-9.0, -0.1))?;
            let ab = solve(
                &e(-9.0, -0.1)
                    .iter()
                    .zip(e(0.1, 9.0))
                    .map(|(x, y)| *x || y)
                    .collect::<Vec<_>>(),
            )?;
            let at = |u: &urlab::elliptic::Solution| u.field.interpolate(&pole);
            let add = (at(&ab)? - at(&a)? - at(&b)?).abs();
            c.expect(add <= 0.05, format!("additivity defect {add:.1e}"));

            let big = solve(&e(0.0, 9.0))?;
            let dips = (0..sys.len())
                .filter(|&i| sys.in_domain(i))
                .map(|i| a.field.values[i] - big.field.values[i])
                .fold(f64::NEG_INFINITY, f64::max);
            c.expect(dips <= tol, format!("monotone, worst {dips:.1e}"));
            let (lo, hi) = (0..sys.len())
                .filter(|&i| sys.in_domain(i))
                .map(|i| big.field.values[i])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(v), u.max(v)));
            c.expect(
                lo >= -tol && hi <= 1.0 + tol,
                format!("range [{lo:.1e}, {:.1e}]", hi - 1.0),
            );
        }
    }
    let shift = (halves[1] - halves[0]).abs();
    c.expect(shift <= 0.05, format!("h/2 shift {shift:.1e}"));
    c.done()
}

fn c9_ainfty() -> Outcome {
    let mut c = Check::new();
    let plane = make_plane_set(3, 1, 1.0, 1.0 / 256.0)?;
    let graph = make_lipschitz_graph(3, 1, &sawtooth(0.5, 0.25, 2), 0.5, 1.0, 1.0 / 256.0)?;
    let deltas = [0.01, 0.05, 0.2];
    for (name, s) in [("plane", &plane), ("graph", &graph)] {
        let grid = Grid::centered(&[0.0; 3], 0.5, 1.0 / 64.0)?;
        let sys = System::assemble(s, grid, SolverConfig::default())?;
        let ball = Ball::new(near(s, &[0.0; 3]), 0.25);
        let sc = ainfty_scatter(&sys, s, &ball, 64, 0)?;
        let env: Vec<f64> = deltas.iter().map(|&d| envelope(&sc.points, d)).collect();
        let sizes: Vec<usize> = deltas
            .iter()
            .map(|&d| sc.points.iter().filter(|p| p.omega_ratio < d).count())
            .collect();
        let monotone = env.windows(2).all(|w| w[0] <= w[1]);
        c.expect(
            sc.points.len() == 64 && monotone && env[0] < env[2],
            format!(
                "{name} envelope {:.3} {:.3} {:.3} over {sizes:?} sets",
                env[0], env[1], env[2]
            ),
        );
    }
    c.done()
}

fn c10_sn() -> Outcome {
    let mut c = Check::new();
    let r = 0.125;
    let s = make_lipschitz_graph(3, 1, &sawtooth(0.2, 0.25, 2), 0.2, 1.0, 1.0 / 2048.0)?;
    let cfg = SolverConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..10 {
        let x = near(&s, &[rng.gen_range(-0.5..0.5), 0.0, 0.0]);
        let ball = Ball::new(x, r);
        let g = |k: usize| s.point(k)[0];
        let coarse = sn_check(&s, &ball, cfg, r / 32.0, &g)?.ratio_sup;
        let fine = sn_check(&s, &ball, cfg, r / 64.0, &g)?.ratio_sup;
        if !(coarse.is_finite() && fine.is_finite() && coarse > 0.0) {
            return Ok((false, format!("ratio {coarse} -> {fine}")));
        }
        lo = lo.min(fine / coarse);
        hi = hi.max(fine / coarse);
    }
    c.expect(
        lo >= 0.5 && hi <= 2.0,
        format!("10 balls, h/2 change in [{lo:.3}, {hi:.3}]"),
    );
    let ball = Ball::new(near(&s, &[0.0; 3]), r);
    let k = sn_check(&s, &ball, cfg, r / 32.0, &|_| 1.0)?;
    c.expect(
        k.square_fn <= 1e-3 * k.sup2,
        format!("constant data {:.1e} of sup^2", k.square_fn / k.sup2),
    );
    c.done()
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("c_beta suite", 1, c1_constants),
        ("gradient identity", 30, c2_gradient),
        ("plane exactness", 60, c3_plane),
        ("Wasserstein LP", 300, c4_lp),
        ("Whitney invariants", 120, c5_whitney),
        ("UR discrimination", 600, c6_ur),
        ("Carleson estimator", 600, c7_carleson),
        ("harmonic measure", 900, c8_harmonic),
        ("A-infinity scatter", 1200, c9_ainfty),
        ("S<N", 900, c10_sn),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let result = run();
        let took = clock.elapsed();
        let in_time = took <= Duration::from_secs(*limit);
        let (pass, detail) = match result {
            Ok((p, d)) => (p && in_time, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} in {:.1} s (limit {limit} s){}; {detail}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            if in_time { "" } else { " over time" },
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
