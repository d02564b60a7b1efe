//! One function per subcommand. Each writes its CSV tables into the run
//! directory and returns a JSON summary.

use crate::config::{CarlesonFunction, ExperimentConfig, SetKind};
use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use std::cell::RefCell;
use std::path::Path;
use urlab::carleson::{carleson_norm_shell, e_sets_indicator, CarlesonEstimate};
use urlab::distances::Kernel;
use urlab::elliptic::{ainfty_scatter, envelope, harmonic_measure, sn_check, System};
use urlab::geometry::{ahlfors_constant, sample_balls};
use urlab::grid::Grid;
use urlab::identities::{sample_probes, verify_identities};
use urlab::wasserstein::alpha_number;
use urlab::whitney::{decompose, decompose_region, ur_square_sum_stratified, AlphaCache, DyadicBox, WhitneyAnalysis};
use urlab::{Ball, DiscreteMeasure};

pub struct Outcome {
    pub files: Vec<String>,
    pub summary: Value,
}

struct Table {
    name: String,
    writer: csv::Writer<std::fs::File>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(dir.join(name)).with_context(|| format!("creating {name}"))?;
        writer.write_record(header)?;
        Ok(Table {
            name: name.to_string(),
            writer,
        })
    }

    fn row(&mut self, fields: Vec<String>) -> Result<()> {
        self.writer.write_record(&fields)?;
        Ok(())
    }

    fn finish(mut self) -> Result<String> {
        self.writer.flush()?;
        Ok(self.name)
    }
}

fn strs(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn axes(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|a| format!("{prefix}{a}")).collect()
}

fn nums(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn check_dim(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        bail!("{what} has {} coordinates, the set lives in dimension {n}", v.len());
    }
    Ok(())
}

fn balls(cfg: &ExperimentConfig, sigma: &DiscreteMeasure) -> Result<Vec<Ball>> {
    let spec = &cfg.balls;
    if spec.centers.is_empty() {
        let out = sample_balls(sigma, spec.count, cfg.seed);
        if out.is_empty() {
            bail!("no admissible balls could be sampled");
        }
        return Ok(out);
    }
    if !(spec.radii.len() == 1 || spec.radii.len() == spec.centers.len()) {
        bail!("balls.radii must hold one radius or one per center");
    }
    spec.centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            check_dim(c, sigma.ambient_dim, "ball center")?;
            let r = spec.radii[if spec.radii.len() == 1 { 0 } else { i }];
            Ok(sigma.snap(&Ball::new(c.clone(), r)))
        })
        .collect()
}

fn ball_fields(b: &Ball) -> Vec<String> {
    let mut v = nums(&b.center);
    v.push(b.radius.to_string());
    v
}

fn ball_header(n: usize) -> Vec<String> {
    let mut h = axes("center_", n);
    h.push("radius".into());
    h
}

pub fn execute(name: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let sigma = cfg.set.build()?;
    match name {
        "gen" => gen(cfg, &sigma, dir),
        "ahlfors" => ahlfors(cfg, &sigma, dir),
        "alpha" => alpha(cfg, &sigma, dir),
        "whitney" => whitney(cfg, &sigma, dir),
        "ur-sum" => ur_sum(cfg, dir),
        "dist-fields" => dist_fields(cfg, &sigma, dir),
        "verify-identities" => identities(cfg, &sigma, dir),
        "carleson" => carleson(cfg, &sigma, dir),
        "solve" => solve(cfg, &sigma, dir),
        "hm" => hm(cfg, &sigma, dir),
        "ainfty" => ainfty(cfg, &sigma, dir),
        "sn" => sn(cfg, &sigma, dir),
        other => bail!("unknown subcommand {other}"),
    }
}

fn gen(_cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let f = std::fs::File::create(dir.join("set.txt"))?;
    sigma.write_columnar(std::io::BufWriter::new(f))?;
    Ok(Outcome {
        files: vec!["set.txt".into()],
        summary: json!({
            "points": sigma.len(),
            "ambient_dim": sigma.ambient_dim,
            "intrinsic_dim": sigma.intrinsic_dim,
            "total_mass": sigma.total_mass(),
            "spacing": sigma.spacing,
            "extent": sigma.extent,
            "descriptor": sigma.descriptor,
        }),
    })
}

fn ahlfors(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let bs = balls(cfg, sigma)?;
    let rep = ahlfors_constant(sigma, &bs, cfg.ahlfors.bound);
    let mut head = ball_header(sigma.ambient_dim);
    head.extend(strs(&["ratio", "excluded"]));
    let mut t = Table::create(dir, "ahlfors.csv", &head)?;
    for (b, r) in &rep.ratios {
        let mut row = ball_fields(b);
        row.push(r.to_string());
        row.push(String::new());
        t.row(row)?;
    }
    for (b, why) in &rep.excluded {
        let mut row = ball_fields(b);
        row.push(String::new());
        row.push(why.clone());
        t.row(row)?;
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({
            "balls": rep.ratios.len(),
            "excluded": rep.excluded.len(),
            "c_sigma": rep.c_sigma,
            "bound": rep.bound,
            "pass": rep.pass,
        }),
    })
}

fn alpha(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let bs = balls(cfg, sigma)?;
    let acfg = cfg.alpha.config();
    let mut head = ball_header(sigma.ambient_dim);
    head.extend(strs(&["alpha", "initial", "evaluations", "lp_iterations"]));
    head.extend((0..sigma.ambient_dim).map(|a| format!("offset_{a}")));
    head.extend(strs(&["basis", "c", "error"]));
    let mut t = Table::create(dir, "alpha.csv", &head)?;
    let blank = sigma.ambient_dim + 6;
    let (mut worst, mut failed) = (0.0f64, 0);
    for b in &bs {
        let mut row = ball_fields(b);
        match alpha_number(sigma, b, &acfg) {
            Ok(a) => {
                worst = worst.max(a.value);
                row.extend([
                    a.value.to_string(),
                    a.initial.to_string(),
                    a.evaluations.to_string(),
                    a.lp_iterations.to_string(),
                ]);
                row.extend(a.flat.offset.iter().map(|v| v.to_string()));
                let basis: Vec<String> = a.flat.basis.iter().flatten().map(|v| v.to_string()).collect();
                row.extend([basis.join(" "), a.flat.c.to_string(), String::new()]);
            }
            Err(e) => {
                failed += 1;
                row.extend(std::iter::repeat(String::new()).take(blank));
                row.push(e.to_string());
            }
        }
        t.row(row)?;
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({ "balls": bs.len(), "failed": failed, "max_alpha": worst }),
    })
}

fn whitney(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let w = &cfg.whitney;
    let bbox = DyadicBox::around(sigma);
    let dec = decompose(sigma, &bbox, w.depth)?;
    let condition = dec.check_whitney_condition(sigma);
    let neighbors = dec.neighbor_counts().into_iter().max().unwrap_or(0);
    let mut an = WhitneyAnalysis::new(sigma, dec, w.config(&cfg.alpha))?;
    let mut mu_failures = 0;
    if w.with_alpha {
        for i in 0..an.decomposition.cubes.len() {
            if an.mu_q(i).is_err() {
                mu_failures += 1;
            }
            for k in 1..=w.k_max {
                if an.alpha_qk(i, k).is_err() {
                    break;
                }
            }
        }
    }
    let f = std::fs::File::create(dir.join("whitney.csv"))?;
    an.decomposition.write_csv(std::io::BufWriter::new(f), w.k_max)?;
    let dec = &an.decomposition;
    Ok(Outcome {
        files: vec!["whitney.csv".into()],
        summary: json!({
            "depth": w.depth,
            "cubes": dec.cubes.len(),
            "undecided": dec.undecided.len(),
            "whitney_condition": condition,
            "max_neighbors": neighbors,
            "mu_failures": mu_failures,
            "lambda": w.lambda,
        }),
    })
}

fn ur_sum(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let w = &cfg.whitney;
    let generations: Vec<Option<usize>> = if cfg.set.kind == SetKind::Cantor && !w.cantor_levels.is_empty() {
        w.cantor_levels.iter().map(|&m| Some(m)).collect()
    } else if cfg.set.kind == SetKind::Cantor {
        vec![Some(cfg.set.m)]
    } else {
        vec![None]
    };
    let wcfg = w.config(&cfg.alpha);
    let census = w.census(cfg.seed);
    let mut t = Table::create(
        dir,
        "ur_sum.csv",
        &strs(&["m", "radius", "value", "std_err", "coverage", "ratio_to_previous"]),
    )?;
    let mut previous: Vec<Option<f64>> = vec![None; w.radii.len()];
    let mut min_ratio = f64::INFINITY;
    let mut rows = Vec::new();
    for m in generations {
        let sigma = match m {
            Some(m) => {
                let mut s = cfg.set.clone();
                s.m = m;
                s.build()?
            }
            None => cfg.set.build()?,
        };
        check_dim(&w.point, sigma.ambient_dim, "whitney.point")?;
        let x = sigma.point(sigma.nearest(&w.point).0).to_vec();
        let bbox = DyadicBox::around(&sigma);
        let max_level = match (w.max_level, m) {
            (0, Some(m)) => 2 * m as u32 + 2,
            (0, None) => 10,
            (l, _) => l,
        };
        let mut cache = AlphaCache::new();
        for (j, &r) in w.radii.iter().enumerate() {
            let s = ur_square_sum_stratified(&sigma, &bbox, &x, r, w.k, max_level, &wcfg, &census, &mut cache)?;
            let ratio = previous[j].map(|p| s.value / p);
            if let Some(q) = ratio {
                min_ratio = min_ratio.min(q);
            }
            previous[j] = Some(s.value);
            t.row(vec![
                m.map(|v| v.to_string()).unwrap_or_default(),
                r.to_string(),
                s.value.to_string(),
                s.std_err.to_string(),
                s.coverage.to_string(),
                ratio.map(|q| q.to_string()).unwrap_or_default(),
            ])?;
            rows.push(json!({ "m": m, "radius": r, "value": s.value, "std_err": s.std_err }));
        }
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({
            "rows": rows,
            "min_ratio": if min_ratio.is_finite() { json!(min_ratio) } else { Value::Null },
        }),
    })
}

fn dist_fields(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let vcfg = cfg.distances.config(cfg.seed);
    let probes = sample_probes(sigma, &vcfg)?;
    let k = Kernel::new(sigma);
    let n = sigma.ambient_dim;
    let mut head = axes("x_", n);
    head.extend(strs(&["dist", "d_beta"]));
    head.extend(axes("h_beta_", n));
    head.extend(axes("grad_d_beta_", n));
    head.extend(strs(&["s_x", "ratio_gradient", "b", "v_norm"]));
    let mut t = Table::create(dir, "dist_fields.csv", &head)?;
    let mut grad_max = 0.0f64;
    for x in &probes {
        let bv = k.bv_fields(x, vcfg.alpha, vcfg.beta)?;
        let h = k.h_beta(x, vcfg.beta)?;
        let g = bv.grad_d_beta.iter().map(|v| v * v).sum::<f64>().sqrt();
        grad_max = grad_max.max(g);
        let mut row = nums(x);
        row.push(sigma.dist_to_gamma(x).to_string());
        row.push(bv.d_beta.to_string());
        row.extend(nums(&h));
        row.extend(nums(&bv.grad_d_beta));
        row.push(bv.s_x.to_string());
        row.push(k.ratio_gradient(x, vcfg.alpha, vcfg.beta)?.to_string());
        row.push(bv.b.to_string());
        row.push(bv.v.iter().map(|v| v * v).sum::<f64>().sqrt().to_string());
        t.row(row)?;
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({ "probes": probes.len(), "max_grad_d_beta": grad_max }),
    })
}

fn identities(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let rows = verify_identities(sigma, &cfg.distances.config(cfg.seed), cfg.set.kind == SetKind::Plane)?;
    let mut t = Table::create(
        dir,
        "identities.csv",
        &strs(&["identity", "checks", "max_residual", "tolerance", "status"]),
    )?;
    for r in &rows {
        t.row(vec![
            r.identity.clone(),
            r.checks.to_string(),
            r.max_residual.to_string(),
            r.tolerance.to_string(),
            if r.pass { "pass" } else { "fail" }.to_string(),
        ])?;
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({
            "identities": rows.len(),
            "all_pass": rows.iter().all(|r| r.pass),
        }),
    })
}

fn carleson(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let c = &cfg.carleson;
    let bs = balls(cfg, sigma)?;
    let rmin = bs.iter().map(|b| b.radius).fold(f64::INFINITY, f64::min);
    let h = rmin / c.cells_per_radius;
    let mut parts: Vec<CarlesonEstimate> = Vec::new();
    match c.function {
        CarlesonFunction::One => {
            parts.push(carleson_norm_shell(&|_| Ok(1.0), sigma, &bs, h, c.squared, c.shell)?);
        }
        CarlesonFunction::E2 => {
            check_dim(&c.e_center, sigma.ambient_dim, "carleson.e_center")?;
            let b0 = sigma.snap(&Ball::new(c.e_center.clone(), c.e_radius));
            let f = |x: &[f64]| e_sets_indicator(sigma, &b0, c.eps, x).map(|e| if e[1] { 1.0 } else { 0.0 });
            parts.push(carleson_norm_shell(&f, sigma, &bs, h, c.squared, c.shell)?);
        }
        CarlesonFunction::A => {
            let bbox = DyadicBox::around(sigma);
            for b in &bs {
                let region = Ball::new(b.center.clone(), 1.1 * b.radius);
                let dec = decompose_region(sigma, &bbox, cfg.whitney.depth, &region)?;
                let an = RefCell::new(WhitneyAnalysis::new(sigma, dec, cfg.whitney.config(&cfg.alpha))?);
                let f = |x: &[f64]| an.borrow_mut().a_x(x, c.a_alpha, c.a_beta).map(|a| a.value);
                parts.push(carleson_norm_shell(
                    &f,
                    sigma,
                    std::slice::from_ref(b),
                    h,
                    c.squared,
                    c.shell,
                )?);
            }
        }
    }
    let per_ball: Vec<_> = parts.into_iter().flat_map(|p| p.per_ball).collect();
    let mut head = ball_header(sigma.ambient_dim);
    head.extend(strs(&[
        "value",
        "mass",
        "cells",
        "skipped",
        "shell_cells",
        "shell_rate",
    ]));
    let mut t = Table::create(dir, "carleson.csv", &head)?;
    for b in &per_ball {
        let mut row = ball_fields(&b.ball);
        row.extend([
            b.value.to_string(),
            b.mass.to_string(),
            b.cells.to_string(),
            b.skipped.to_string(),
            b.shell_cells.to_string(),
            b.shell_rate.to_string(),
        ]);
        t.row(row)?;
    }
    let supremum = per_ball.iter().fold(0.0f64, |m, b| m.max(b.value));
    let shell_rate = per_ball.iter().fold(0.0f64, |m, b| m.max(b.shell_rate));
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({
            "function": c.function,
            "squared": c.squared,
            "h": h,
            "supremum": supremum,
            "shell_rate": shell_rate,
            "skipped": per_ball.iter().map(|b| b.skipped).sum::<usize>(),
        }),
    })
}

fn system(cfg: &ExperimentConfig, sigma: &DiscreteMeasure) -> Result<System> {
    let g = &cfg.grid;
    check_dim(&g.center, sigma.ambient_dim, "grid.center")?;
    let grid = Grid::centered(&g.center, g.half_width, g.h)?;
    Ok(System::assemble(sigma, grid, cfg.solver)?)
}

fn solve(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let sys = system(cfg, sigma)?;
    let sol = sys.solve(&|k| cfg.data.eval(sigma.point(k)))?;
    sol.field.dump(dir, "u")?;
    let (lo, hi) = (0..sys.len())
        .filter(|&i| sys.in_domain(i))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| {
            (a.min(sol.field.values[i]), b.max(sol.field.values[i]))
        });
    let mut t = Table::create(
        dir,
        "solve.csv",
        &strs(&["cells", "levels", "iterations", "residual", "min", "max"]),
    )?;
    t.row(vec![
        sys.len().to_string(),
        sys.levels().to_string(),
        sol.iterations.to_string(),
        sol.residual.to_string(),
        lo.to_string(),
        hi.to_string(),
    ])?;
    Ok(Outcome {
        files: vec![t.finish()?, "u.f64".into(), "u.mask".into(), "u.json".into()],
        summary: json!({
            "cells": sys.len(),
            "dims": sys.grid.dims,
            "iterations": sol.iterations,
            "residual": sol.residual,
            "min": lo,
            "max": hi,
        }),
    })
}

fn hm(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    check_dim(&cfg.hm.pole, sigma.ambient_dim, "hm.pole")?;
    let sys = system(cfg, sigma)?;
    let in_e: Vec<bool> = (0..sigma.len()).map(|k| cfg.data.eval(sigma.point(k)) > 0.5).collect();
    let r = harmonic_measure(&sys, sigma, &in_e, &cfg.hm.pole)?;
    let mut head = axes("pole_", sigma.ambient_dim);
    head.extend(strs(&[
        "set_size",
        "omega",
        "complement",
        "mass",
        "iterations",
        "residual",
    ]));
    let mut t = Table::create(dir, "hm.csv", &head)?;
    let mut row = nums(&r.pole);
    row.extend([
        r.set_size.to_string(),
        r.value.to_string(),
        r.complement.to_string(),
        r.mass.to_string(),
        r.iterations.to_string(),
        r.residual.to_string(),
    ]);
    t.row(row)?;
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: serde_json::to_value(&r)?,
    })
}

fn ainfty(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let a = &cfg.ainfty;
    check_dim(&a.center, sigma.ambient_dim, "ainfty.center")?;
    let sys = system(cfg, sigma)?;
    let ball = sigma.snap(&Ball::new(a.center.clone(), a.radius));
    let sc = ainfty_scatter(&sys, sigma, &ball, a.sets, cfg.seed)?;
    let mut t = Table::create(dir, "scatter.csv", &strs(&["omega_ratio", "sigma_ratio", "balls"]))?;
    for p in &sc.points {
        t.row(vec![
            p.omega_ratio.to_string(),
            p.sigma_ratio.to_string(),
            p.descriptor.clone(),
        ])?;
    }
    let mut e = Table::create(dir, "envelope.csv", &strs(&["delta", "envelope"]))?;
    let env: Vec<f64> = a.deltas.iter().map(|&d| envelope(&sc.points, d)).collect();
    for (d, v) in a.deltas.iter().zip(&env) {
        e.row(vec![d.to_string(), v.to_string()])?;
    }
    let monotone = env.windows(2).all(|w| w[0] <= w[1]);
    Ok(Outcome {
        files: vec![t.finish()?, e.finish()?],
        summary: json!({
            "pole": sc.pole,
            "omega_ball": sc.omega_ball,
            "sigma_ball": sc.sigma_ball,
            "sets": sc.points.len(),
            "envelope": env,
            "monotone": monotone,
            "strict": env.len() >= 2 && env[0] < env[env.len() - 1],
        }),
    })
}

fn sn(cfg: &ExperimentConfig, sigma: &DiscreteMeasure, dir: &Path) -> Result<Outcome> {
    let bs = balls(cfg, sigma)?;
    let data = crate::config::DataSection {
        kind: cfg.sn.data,
        threshold: cfg.data.threshold,
    };
    let mut head = ball_header(sigma.ambient_dim);
    head.extend(strs(&[
        "h",
        "square_fn",
        "sup2",
        "n_norm2",
        "ratio_sup",
        "ratio_n",
        "empty_cones",
        "iterations",
    ]));
    let mut t = Table::create(dir, "sn.csv", &head)?;
    let mut worst = 0.0f64;
    for b in &bs {
        let h = b.radius / cfg.sn.cells_per_radius;
        let r = sn_check(sigma, b, cfg.solver, h, &|k| data.eval(sigma.point(k)))?;
        worst = worst.max(r.ratio_sup);
        let mut row = ball_fields(b);
        row.extend([
            r.h.to_string(),
            r.square_fn.to_string(),
            r.sup2.to_string(),
            r.n_norm2.to_string(),
            r.ratio_sup.to_string(),
            r.ratio_n.to_string(),
            r.empty_cones.to_string(),
            r.iterations.to_string(),
        ]);
        t.row(row)?;
    }
    Ok(Outcome {
        files: vec![t.finish()?],
        summary: json!({
            "balls": bs.len(),
            "data": cfg.sn.data,
            "max_ratio_sup": worst,
        }),
    })
}
