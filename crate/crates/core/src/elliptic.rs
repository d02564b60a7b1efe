//! Finite-volume discretization of L_{β,γ} = -div(D_β^{d+1+γ-n} ∇·) on a
//! uniform grid, harmonic measure, and the A_∞ and S<N experiments.
//!
//! Cells whose center lies within `collar · h` of Γ carry Dirichlet data;
//! the box walls are zero-flux unless Dirichlet walls are requested. Face
//! weights are D_β at face midpoints raised to d+1+γ-n, so the matrix is a
//! symmetric M-matrix and the discrete maximum principle holds.

use crate::error::{Error, Result};
use crate::geometry::{corkscrew_point, Ball, DiscreteMeasure};
use crate::grid::{CellKind, Grid, GridField, MAX_DIM};
use crate::treecode::KernelTree;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Walls {
    Neumann,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    Jacobi,
    Multigrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub beta: f64,
    pub gamma: f64,
    /// Relative residual at which CG stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Collar half-width in units of h.
    pub collar: f64,
    pub walls: Walls,
    pub preconditioner: Preconditioner,
    /// Opening angle of the treecode used for D_β.
    pub theta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            beta: 1.0,
            gamma: 0.0,
            tol: 1e-8,
            max_iter: 20000,
            collar: 1.5,
            walls: Walls::Neumann,
            preconditioner: Preconditioner::Multigrid,
            theta: 0.25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Parameter(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma > -1.0 && self.gamma < 1.0) {
            return Err(Error::Parameter(format!(
                "gamma must lie in (-1, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) || self.max_iter == 0 {
            return Err(Error::Parameter(
                "CG tolerance must lie in (0, 1) with a positive iteration cap".into(),
            ));
        }
        if !(self.collar >= 0.5) {
            return Err(Error::Parameter(format!(
                "collar factor must be at least 1/2, got {}",
                self.collar
            )));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Parameter(format!(
                "treecode angle must lie in (0, 1), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

// Gauss-Seidel sweeps per side of the V-cycle and the coarse correction factor.
const SMOOTHING: usize = 2;
const COARSE_SCALE: f64 = 1.6;
const COARSEST: usize = 1500;

struct Level {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    diag: Vec<f64>,
    // faces[a][i] couples i and i + strides[a]; zero when there is no such neighbor
    faces: Vec<Vec<f64>>,
    active: Vec<bool>,
    // index of the aggregate on the next level
    parent: Vec<u32>,
    dense: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    dense_index: Vec<usize>,
}

impl Level {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.len {
            y[i] = self.diag[i] * x[i];
        }
        for (a, f) in self.faces.iter().enumerate() {
            let s = self.strides[a];
            for i in 0..self.len.saturating_sub(s) {
                let w = f[i];
                if w != 0.0 {
                    y[i] -= w * x[i + s];
                    y[i + s] -= w * x[i];
                }
            }
        }
        for i in 0..self.len {
            if !self.active[i] {
                y[i] = 0.0;
            }
        }
    }

    #[inline]
    fn relax(&self, i: usize, b: &[f64], x: &mut [f64]) {
        let mut acc = b[i];
        for (a, f) in self.faces.iter().enumerate() {
            let s = self.strides[a];
            if i + s < self.len {
                acc += f[i] * x[i + s];
            }
            if i >= s {
                acc += f[i - s] * x[i - s];
            }
        }
        x[i] = acc / self.diag[i];
    }

    fn sweep(&self, b: &[f64], x: &mut [f64], forward: bool) {
        if forward {
            for i in 0..self.len {
                if self.active[i] {
                    self.relax(i, b, x);
                }
            }
        } else {
            for i in (0..self.len).rev() {
                if self.active[i] {
                    self.relax(i, b, x);
                }
            }
        }
    }

    /// Galerkin coarsening with piecewise-constant prolongation over 2^n blocks.
    fn coarsen(&mut self) -> Level {
        let n = self.dims.len();
        let dims: Vec<usize> = self.dims.iter().map(|d| d.div_ceil(2)).collect();
        let mut strides = Vec::with_capacity(n);
        let mut acc = 1;
        for &d in &dims {
            strides.push(acc);
            acc *= d;
        }
        let len = acc;
        let mut parent = vec![0u32; self.len];
        let mut c = [0usize; MAX_DIM];
        for (i, p) in parent.iter_mut().enumerate() {
            let mut idx = i;
            for a in 0..n {
                c[a] = idx % self.dims[a];
                idx /= self.dims[a];
            }
            let mut pi = 0;
            for a in (0..n).rev() {
                pi = pi * dims[a] + c[a] / 2;
            }
            *p = pi as u32;
        }
        let mut diag = vec![0.0; len];
        let mut active = vec![false; len];
        for i in 0..self.len {
            if self.active[i] {
                let pi = parent[i] as usize;
                diag[pi] += self.diag[i];
                active[pi] = true;
            }
        }
        let mut faces = vec![vec![0.0; len]; n];
        for a in 0..n {
            let s = self.strides[a];
            let f = &self.faces[a];
            for i in 0..self.len.saturating_sub(s) {
                let w = f[i];
                if w == 0.0 || !self.active[i] || !self.active[i + s] {
                    continue;
                }
                let (pi, pj) = (parent[i] as usize, parent[i + s] as usize);
                if pi == pj {
                    diag[pi] -= 2.0 * w;
                } else {
                    faces[a][pi] += w;
                }
            }
        }
        for i in 0..len {
            if !active[i] {
                diag[i] = 1.0;
            }
        }
        self.parent = parent;
        Level {
            dims,
            strides,
            len,
            diag,
            faces,
            active,
            parent: Vec::new(),
            dense: None,
            dense_index: Vec::new(),
        }
    }

    fn factor(&mut self) -> Result<()> {
        let index: Vec<usize> = (0..self.len).filter(|&i| self.active[i]).collect();
        let mut pos = vec![usize::MAX; self.len];
        for (k, &i) in index.iter().enumerate() {
            pos[i] = k;
        }
        let m = index.len();
        let mut a = DMatrix::<f64>::zeros(m, m);
        for (k, &i) in index.iter().enumerate() {
            a[(k, k)] = self.diag[i];
        }
        for (ax, f) in self.faces.iter().enumerate() {
            let s = self.strides[ax];
            for i in 0..self.len.saturating_sub(s) {
                if f[i] != 0.0 && pos[i] != usize::MAX && pos[i + s] != usize::MAX {
                    a[(pos[i], pos[i + s])] -= f[i];
                    a[(pos[i + s], pos[i])] -= f[i];
                }
            }
        }
        self.dense = Some(a.cholesky().ok_or_else(|| Error::Numeric {
            message: "coarse multigrid operator is not positive definite".into(),
            residual: f64::NAN,
        })?);
        self.dense_index = index;
        Ok(())
    }
}

struct Work {
    b: Vec<f64>,
    x: Vec<f64>,
    r: Vec<f64>,
}

/// The assembled linear system on one grid.
pub struct System {
    pub grid: Grid,
    pub mask: Vec<CellKind>,
    /// Nearest support index of every collar cell, `usize::MAX` elsewhere.
    pub nearest: Vec<usize>,
    pub config: SolverConfig,
    /// d + 1 + γ - n.
    pub exponent: f64,
    pinned: Vec<bool>,
    inside: Vec<bool>,
    levels: Vec<Level>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: GridField,
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cell_ranges(grid: &Grid, p: &[f64], radius: f64) -> Option<[(usize, usize); MAX_DIM]> {
    let mut out = [(0usize, 0usize); MAX_DIM];
    for a in 0..grid.dim() {
        let lo = ((p[a] - radius - grid.lo[a]) / grid.h - 0.5).ceil();
        let hi = ((p[a] + radius - grid.lo[a]) / grid.h - 0.5).floor();
        let lo = lo.max(0.0);
        let hi = hi.min(grid.dims[a] as f64 - 1.0);
        if hi < lo {
            return None;
        }
        out[a] = (lo as usize, hi as usize);
    }
    Some(out)
}

/// Calls `visit(index, center)` for each cell whose index lies in the given ranges.
fn for_each_in_ranges(grid: &Grid, ranges: &[(usize, usize)], mut visit: impl FnMut(usize, &[f64])) {
    let n = grid.dim();
    let mut c: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    let mut x = vec![0.0; n];
    loop {
        for a in 0..n {
            x[a] = grid.lo[a] + (c[a] as f64 + 0.5) * grid.h;
        }
        visit(grid.index(&c), &x);
        let mut a = 0;
        loop {
            if a == n {
                return;
            }
            c[a] += 1;
            if c[a] <= ranges[a].1 {
                break;
            }
            c[a] = ranges[a].0;
            a += 1;
        }
    }
}

/// Distance to Γ for every cell whose center lies within `radius` of it (infinity elsewhere).
pub fn near_distances(sigma: &DiscreteMeasure, grid: &Grid, radius: f64) -> Vec<f64> {
    let mut near = vec![f64::INFINITY; grid.len()];
    let n = grid.dim();
    for k in 0..sigma.len() {
        let p = sigma.point(k);
        if let Some(r) = cell_ranges(grid, p, radius) {
            for_each_in_ranges(grid, &r[..n], |i, x| {
                let d = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if d < near[i] {
                    near[i] = d;
                }
            });
        }
    }
    let hi = grid.hi();
    let diag = grid
        .lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    for ray in &sigma.completion {
        // march along the ray inside the box; each step covers a slab of cells
        let step = 0.5 * grid.h;
        let reach = diag + ray.start.iter().zip(&grid.lo).map(|(s, l)| (s - l).abs()).sum::<f64>() + radius;
        let steps = (reach / step).ceil() as usize;
        for t in 0..=steps {
            let q: Vec<f64> = (0..n).map(|a| ray.start[a] + t as f64 * step * ray.dir[a]).collect();
            if let Some(r) = cell_ranges(grid, &q, radius + step) {
                for_each_in_ranges(grid, &r[..n], |i, x| {
                    let d = ray.distance(x);
                    if d < near[i] {
                        near[i] = d;
                    }
                });
            }
        }
    }
    near.iter_mut().for_each(|d| {
        if *d > radius {
            *d = f64::INFINITY
        }
    });
    near
}

impl System {
    /// Assembles the flux-form system of L_{β,γ} on `grid`.
    pub fn assemble(sigma: &DiscreteMeasure, grid: Grid, config: SolverConfig) -> Result<System> {
        System::assemble_in(sigma, grid, config, None)
    }

    /// Assembles on the cells of `grid` whose centers lie in `region`; the rest are left out
    /// of the domain and the boundary layer of the region acts as the outer wall.
    pub fn assemble_in(
        sigma: &DiscreteMeasure,
        grid: Grid,
        config: SolverConfig,
        region: Option<&Ball>,
    ) -> Result<System> {
        config.validate()?;
        let n = sigma.ambient_dim;
        let d = sigma.intrinsic_dim;
        if grid.dim() != n {
            return Err(Error::Parameter(format!(
                "grid dimension {} differs from n={n}",
                grid.dim()
            )));
        }
        if d + 1 >= n {
            return Err(Error::Parameter(format!("need d < n-1, got d={d}, n={n}")));
        }
        let h = grid.h;
        if sigma.spacing > 0.5 * h * (1.0 + 1e-9) {
            return Err(Error::Resolution(format!(
                "set spacing {:e} exceeds half the grid step {:e}",
                sigma.spacing, h
            )));
        }
        let len = grid.len();
        let strides = grid.strides();
        let near = near_distances(sigma, &grid, config.collar * h);
        let mut mask = vec![CellKind::Interior; len];
        let mut nearest = vec![usize::MAX; len];
        let mut c = [0usize; MAX_DIM];
        let mut x = vec![0.0; n];
        let mut collar_count = 0;
        let inside: Vec<bool> = match region {
            None => vec![true; len],
            Some(b) => (0..len)
                .map(|i| {
                    grid.center_into(i, &mut x);
                    x.iter().zip(&b.center).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() < b.radius * b.radius
                })
                .collect(),
        };
        for i in 0..len {
            if !inside[i] {
                mask[i] = CellKind::Wall;
                continue;
            }
            if near[i].is_finite() {
                mask[i] = CellKind::Collar;
                grid.center_into(i, &mut x);
                nearest[i] = sigma.nearest(&x).0;
                collar_count += 1;
                continue;
            }
            grid.coords(i, &mut c);
            let edge = (0..n)
                .any(|a| c[a] == 0 || c[a] + 1 == grid.dims[a] || !inside[i - strides[a]] || !inside[i + strides[a]]);
            if edge {
                mask[i] = CellKind::Wall;
            }
        }
        if collar_count == 0 {
            return Err(Error::Topology("no grid cell lies in the Dirichlet collar".into()));
        }
        let pinned: Vec<bool> = (0..len)
            .map(|i| {
                inside[i]
                    && (mask[i] == CellKind::Collar || (mask[i] == CellKind::Wall && config.walls == Walls::Dirichlet))
            })
            .collect();
        let exponent = d as f64 + 1.0 + config.gamma - n as f64;
        let tree = KernelTree::new(sigma, config.theta)?;
        let e = d as f64 + config.beta;
        let power = -exponent / config.beta;
        let scale = h.powi(n as i32 - 2);
        let mut faces = vec![vec![0.0; len]; n];
        let mut mid = vec![0.0; n];
        for i in 0..len {
            grid.coords(i, &mut c);
            for a in 0..n {
                if c[a] + 1 >= grid.dims[a] {
                    continue;
                }
                let j = i + strides[a];
                if (pinned[i] && pinned[j]) || !inside[i] || !inside[j] {
                    continue;
                }
                for b in 0..n {
                    mid[b] = grid.lo[b] + (c[b] as f64 + 0.5) * h;
                }
                mid[a] += 0.5 * h;
                let s = tree
                    .sum(&mid, e)
                    .map_err(|err| Error::Resolution(format!("assembly failed at face midpoint {mid:?}: {err}")))?;
                let w = s.powf(power) * scale;
                if !w.is_finite() || w <= 0.0 {
                    return Err(Error::Numeric {
                        message: format!("non-finite face weight at {mid:?}"),
                        residual: f64::NAN,
                    });
                }
                faces[a][i] = w;
            }
        }
        let mut diag = vec![0.0; len];
        for a in 0..n {
            let s = strides[a];
            for i in 0..len.saturating_sub(s) {
                let w = faces[a][i];
                diag[i] += w;
                diag[i + s] += w;
            }
        }
        for i in 0..len {
            if pinned[i] || !inside[i] {
                diag[i] = 1.0;
            }
        }
        let fine = Level {
            dims: grid.dims.clone(),
            strides,
            len,
            diag,
            faces,
            active: (0..len).map(|i| inside[i] && !pinned[i]).collect(),
            parent: Vec::new(),
            dense: None,
            dense_index: Vec::new(),
        };
        let mut system = System {
            grid,
            mask,
            nearest,
            config,
            exponent,
            pinned,
            inside,
            levels: vec![fine],
        };
        system.check_topology()?;
        if config.preconditioner == Preconditioner::Multigrid {
            system.build_hierarchy()?;
        }
        Ok(system)
    }

    fn check_topology(&self) -> Result<()> {
        let lev = &self.levels[0];
        let mut seen: Vec<bool> = (0..lev.len).map(|i| self.pinned[i] || !self.inside[i]).collect();
        let mut queue: VecDeque<usize> = (0..lev.len).filter(|&i| self.pinned[i]).collect();
        while let Some(i) = queue.pop_front() {
            for (a, f) in lev.faces.iter().enumerate() {
                let s = lev.strides[a];
                if i + s < lev.len && f[i] != 0.0 && !seen[i + s] {
                    seen[i + s] = true;
                    queue.push_back(i + s);
                }
                if i >= s && f[i - s] != 0.0 && !seen[i - s] {
                    seen[i - s] = true;
                    queue.push_back(i - s);
                }
            }
        }
        let orphans = seen.iter().filter(|s| !**s).count();
        if orphans > 0 {
            return Err(Error::Topology(format!(
                "{orphans} cells are not connected to any Dirichlet cell"
            )));
        }
        Ok(())
    }

    fn build_hierarchy(&mut self) -> Result<()> {
        loop {
            let last = self.levels.last_mut().expect("fine level exists");
            let active = last.active.iter().filter(|a| **a).count();
            if active <= COARSEST || last.dims.iter().all(|&d| d <= 2) {
                last.factor()?;
                return Ok(());
            }
            let next = last.coarsen();
            self.levels.push(next);
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned[i]
    }

    /// False for cells left out by the assembly region.
    pub fn in_domain(&self, i: usize) -> bool {
        self.inside[i]
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Weight of the face between cell `i` and its upper neighbor along `axis`, times h^{n-2}.
    pub fn face_weight(&self, i: usize, axis: usize) -> f64 {
        self.levels[0].faces[axis][i]
    }

    /// Matrix on the unknown cells (pinned rows act as zero).
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.levels[0].apply(x, y);
    }

    /// Nonzero entries of the matrix restricted to unknown cells, as (row, column, value).
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let lev = &self.levels[0];
        let mut out = Vec::new();
        for i in 0..lev.len {
            if lev.active[i] {
                out.push((i, i, lev.diag[i]));
            }
        }
        for (a, f) in lev.faces.iter().enumerate() {
            let s = lev.strides[a];
            for i in 0..lev.len.saturating_sub(s) {
                if f[i] != 0.0 && lev.active[i] && lev.active[i + s] {
                    out.push((i, i + s, -f[i]));
                    out.push((i + s, i, -f[i]));
                }
            }
        }
        out
    }

    /// Σ_faces w (u_i - u_j) at every cell, with no elimination of pinned cells.
    pub fn flux_divergence(&self, u: &[f64]) -> Vec<f64> {
        let lev = &self.levels[0];
        let mut y = vec![0.0; lev.len];
        for (a, f) in lev.faces.iter().enumerate() {
            let s = lev.strides[a];
            for i in 0..lev.len.saturating_sub(s) {
                let flux = f[i] * (u[i] - u[i + s]);
                y[i] += flux;
                y[i + s] -= flux;
            }
        }
        y
    }

    fn precondition(&self, r: &[f64], z: &mut [f64], ws: &mut [Work]) {
        match self.config.preconditioner {
            Preconditioner::Jacobi => {
                let lev = &self.levels[0];
                for i in 0..lev.len {
                    z[i] = if lev.active[i] { r[i] / lev.diag[i] } else { 0.0 };
                }
            }
            Preconditioner::Multigrid => {
                ws[0].b.copy_from_slice(r);
                self.vcycle(0, ws);
                z.copy_from_slice(&ws[0].x);
            }
        }
    }

    fn vcycle(&self, l: usize, ws: &mut [Work]) {
        let lev = &self.levels[l];
        let (cur, rest) = ws.split_first_mut().expect("one workspace per level");
        if let Some(chol) = &lev.dense {
            let rhs = DVector::from_iterator(lev.dense_index.len(), lev.dense_index.iter().map(|&i| cur.b[i]));
            let sol = chol.solve(&rhs);
            cur.x.iter_mut().for_each(|v| *v = 0.0);
            for (k, &i) in lev.dense_index.iter().enumerate() {
                cur.x[i] = sol[k];
            }
            return;
        }
        cur.x.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..SMOOTHING {
            lev.sweep(&cur.b, &mut cur.x, true);
        }
        lev.apply(&cur.x, &mut cur.r);
        for i in 0..lev.len {
            cur.r[i] = if lev.active[i] { cur.b[i] - cur.r[i] } else { 0.0 };
        }
        {
            let next = &mut rest[0];
            next.b.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..lev.len {
                if lev.active[i] {
                    next.b[lev.parent[i] as usize] += cur.r[i];
                }
            }
        }
        self.vcycle(l + 1, rest);
        let xc = &rest[0].x;
        for i in 0..lev.len {
            if lev.active[i] {
                cur.x[i] += COARSE_SCALE * xc[lev.parent[i] as usize];
            }
        }
        for _ in 0..SMOOTHING {
            lev.sweep(&cur.b, &mut cur.x, false);
        }
    }

    /// Preconditioned CG for A x = b on the unknown cells.
    pub fn solve_linear(&self, b: &[f64]) -> Result<(Vec<f64>, usize, f64)> {
        let len = self.len();
        let mut x = vec![0.0; len];
        let bnorm = dot(b, b).sqrt();
        if bnorm == 0.0 {
            return Ok((x, 0, 0.0));
        }
        let mut ws: Vec<Work> = if self.config.preconditioner == Preconditioner::Multigrid {
            self.levels
                .iter()
                .map(|l| Work {
                    b: vec![0.0; l.len],
                    x: vec![0.0; l.len],
                    r: vec![0.0; l.len],
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut r = b.to_vec();
        for (i, v) in r.iter_mut().enumerate() {
            if self.pinned[i] {
                *v = 0.0;
            }
        }
        let mut z = vec![0.0; len];
        self.precondition(&r, &mut z, &mut ws);
        let mut p = z.clone();
        let mut q = vec![0.0; len];
        let mut rz = dot(&r, &z);
        let mut res = dot(&r, &r).sqrt() / bnorm;
        for it in 1..=self.config.max_iter {
            self.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                return Err(Error::Numeric {
                    message: "CG breakdown: operator not positive on the search direction".into(),
                    residual: res,
                });
            }
            let alpha = rz / pq;
            for i in 0..len {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            res = dot(&r, &r).sqrt() / bnorm;
            if res <= self.config.tol {
                return Ok((x, it, res));
            }
            self.precondition(&r, &mut z, &mut ws);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..len {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::Numeric {
            message: format!("CG did not converge in {} iterations", self.config.max_iter),
            residual: res,
        })
    }

    /// Dirichlet values on pinned cells: g at collar cells (by nearest support index), 0 on walls.
    pub fn boundary_values(&self, g: &dyn Fn(usize) -> f64) -> Vec<f64> {
        (0..self.len())
            .map(|i| match self.mask[i] {
                CellKind::Collar => g(self.nearest[i]),
                _ => 0.0,
            })
            .collect()
    }

    /// Right-hand side produced by pinned values `gv`.
    pub fn rhs(&self, gv: &[f64]) -> Vec<f64> {
        let lev = &self.levels[0];
        let mut b = vec![0.0; lev.len];
        for (a, f) in lev.faces.iter().enumerate() {
            let s = lev.strides[a];
            for i in 0..lev.len.saturating_sub(s) {
                let w = f[i];
                if w == 0.0 {
                    continue;
                }
                let j = i + s;
                match (self.pinned[i], self.pinned[j]) {
                    (true, false) => b[j] += w * gv[i],
                    (false, true) => b[i] += w * gv[j],
                    _ => {}
                }
            }
        }
        b
    }

    /// Solves L u = 0 with u = g(nearest support point) on the collar.
    pub fn solve(&self, g: &dyn Fn(usize) -> f64) -> Result<Solution> {
        let gv = self.boundary_values(g);
        let b = self.rhs(&gv);
        let (x, iterations, residual) = self.solve_linear(&b)?;
        let mut field = GridField::new(self.grid.clone(), self.mask.clone());
        for i in 0..self.len() {
            field.values[i] = if self.pinned[i] { gv[i] } else { x[i] };
        }
        Ok(Solution {
            field,
            iterations,
            residual,
        })
    }

    fn check_pole(&self, sigma: &DiscreteMeasure, pole: &[f64]) -> Result<Vec<(usize, f64)>> {
        let dist = sigma.dist_to_gamma(pole);
        if dist < 4.0 * self.grid.h * (1.0 - 1e-9) {
            return Err(Error::Precondition(format!(
                "pole at distance {dist:e} from the set, below 4h = {:e}",
                4.0 * self.grid.h
            )));
        }
        self.grid.stencil(pole)
    }

    /// Harmonic measure density at `pole`: one adjoint solve gives ω^X of every boundary set.
    pub fn density(&self, sigma: &DiscreteMeasure, pole: &[f64]) -> Result<Density> {
        let stencil = self.check_pole(sigma, pole)?;
        let len = self.len();
        let mut iota = vec![0.0; len];
        for &(i, w) in &stencil {
            iota[i] += w;
        }
        let mut rhs = iota.clone();
        for (i, v) in rhs.iter_mut().enumerate() {
            if self.pinned[i] {
                *v = 0.0;
            }
        }
        let (v, iterations, residual) = self.solve_linear(&rhs)?;
        let mut rho: Vec<f64> = (0..len).map(|i| if self.pinned[i] { iota[i] } else { 0.0 }).collect();
        let lev = &self.levels[0];
        for (a, f) in lev.faces.iter().enumerate() {
            let s = lev.strides[a];
            for i in 0..len.saturating_sub(s) {
                let w = f[i];
                if w == 0.0 {
                    continue;
                }
                let j = i + s;
                match (self.pinned[i], self.pinned[j]) {
                    (true, false) => rho[i] += w * v[j],
                    (false, true) => rho[j] += w * v[i],
                    _ => {}
                }
            }
        }
        let mut per_point = vec![0.0; sigma.len()];
        let mut wall_mass = 0.0;
        for i in 0..len {
            match self.mask[i] {
                CellKind::Collar => per_point[self.nearest[i]] += rho[i],
                _ if self.pinned[i] => wall_mass += rho[i],
                _ => {}
            }
        }
        Ok(Density {
            pole: pole.to_vec(),
            per_point,
            wall_mass,
            iterations,
            residual,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Density {
    pub pole: Vec<f64>,
    /// ω^X mass carried by the collar cells attached to each support point.
    pub per_point: Vec<f64>,
    /// Mass absorbed by Dirichlet walls (zero for Neumann walls).
    pub wall_mass: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl Density {
    pub fn measure(&self, in_e: &[bool]) -> f64 {
        self.per_point
            .iter()
            .zip(in_e)
            .filter(|(_, e)| **e)
            .map(|(m, _)| m)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.per_point.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HarmonicMeasureResult {
    pub pole: Vec<f64>,
    pub set_size: usize,
    pub value: f64,
    pub complement: f64,
    /// ω^X(E) + ω^X(E^c).
    pub mass: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// ω^X(E) by solving with indicator data of E, plus the complement solve for the mass check.
pub fn harmonic_measure(
    system: &System,
    sigma: &DiscreteMeasure,
    in_e: &[bool],
    pole: &[f64],
) -> Result<HarmonicMeasureResult> {
    if in_e.len() != sigma.len() {
        return Err(Error::Input(format!(
            "set mask has {} entries for {} points",
            in_e.len(),
            sigma.len()
        )));
    }
    system.check_pole(sigma, pole)?;
    let u = system.solve(&|k| if in_e[k] { 1.0 } else { 0.0 })?;
    let v = system.solve(&|k| if in_e[k] { 0.0 } else { 1.0 })?;
    let value = u.field.interpolate(pole)?;
    let complement = v.field.interpolate(pole)?;
    Ok(HarmonicMeasureResult {
        pole: pole.to_vec(),
        set_size: in_e.iter().filter(|e| **e).count(),
        value,
        complement,
        mass: value + complement,
        iterations: u.iterations.max(v.iterations),
        residual: u.residual.max(v.residual),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScatterPoint {
    pub omega_ratio: f64,
    pub sigma_ratio: f64,
    pub descriptor: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Scatter {
    pub ball: Ball,
    pub pole: Vec<f64>,
    pub omega_ball: f64,
    pub sigma_ball: f64,
    pub points: Vec<ScatterPoint>,
    pub iterations: usize,
}

/// Largest σ-ratio among sampled sets with ω-ratio below δ; zero when no set qualifies.
pub fn envelope(points: &[ScatterPoint], delta: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.omega_ratio < delta)
        .fold(0.0, |m, p| m.max(p.sigma_ratio))
}

/// (ω-ratio, σ-ratio) pairs for random unions of sub-balls of `ball` on Γ.
pub fn ainfty_scatter(
    system: &System,
    sigma: &DiscreteMeasure,
    ball: &Ball,
    n_sets: usize,
    seed: u64,
) -> Result<Scatter> {
    let r = ball.radius;
    let pole = corkscrew_point(sigma, ball, system.grid.h)?.point;
    let density = system.density(sigma, &pole)?;
    let inside = sigma.indices_in_ball(&ball.center, r);
    if inside.is_empty() {
        return Err(Error::Degenerate("ball contains no support point".into()));
    }
    let mut in_ball = vec![false; sigma.len()];
    for &i in &inside {
        in_ball[i] = true;
    }
    let omega_ball = density.measure(&in_ball);
    let sigma_ball: f64 = inside.iter().map(|&i| sigma.weights[i]).sum();
    if !(omega_ball > 0.0) || !(sigma_ball > 0.0) {
        return Err(Error::Degenerate(format!(
            "ball rejected: omega(B) = {omega_ball:e}, sigma(B) = {sigma_ball:e}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_sets);
    let mut in_e = vec![false; sigma.len()];
    for _ in 0..n_sets {
        in_e.iter_mut().for_each(|v| *v = false);
        let k = rng.gen_range(1..=5);
        let mut parts = Vec::with_capacity(k);
        for _ in 0..k {
            let c = inside[rng.gen_range(0..inside.len())];
            let s = rng.gen_range(r / 20.0..=r / 4.0);
            for j in sigma.indices_in_ball(sigma.point(c), s) {
                if in_ball[j] {
                    in_e[j] = true;
                }
            }
            parts.push(format!("{c}:{s:.6e}"));
        }
        let omega = density.measure(&in_e);
        let mass: f64 = (0..sigma.len()).filter(|&j| in_e[j]).map(|j| sigma.weights[j]).sum();
        points.push(ScatterPoint {
            omega_ratio: omega / omega_ball,
            sigma_ratio: mass / sigma_ball,
            descriptor: parts.join("|"),
        });
    }
    Ok(Scatter {
        ball: ball.clone(),
        pole,
        omega_ball,
        sigma_ball,
        points,
        iterations: density.iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SnResult {
    pub ball: Ball,
    pub h: f64,
    pub square_fn: f64,
    pub sup2: f64,
    pub n_norm2: f64,
    pub ratio_sup: f64,
    pub ratio_n: f64,
    pub vertices: usize,
    pub empty_cones: usize,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves on the cube around 2B with data g and compares the square function on B
/// with sup_{2B} |u|² σ(B) and ‖N^{2B}(u)‖²_{L²(2B)}.
pub fn sn_check(
    sigma: &DiscreteMeasure,
    ball: &Ball,
    config: SolverConfig,
    h: f64,
    g: &dyn Fn(usize) -> f64,
) -> Result<SnResult> {
    let r = ball.radius;
    if h > r / 32.0 * (1.0 + 1e-9) {
        return Err(Error::Resolution(format!(
            "h = {h:e} does not resolve a ball of radius {r:e} (need h <= r/32)"
        )));
    }
    let grid = Grid::centered(&ball.center, 2.0 * r, h)?;
    let region = Ball::new(ball.center.clone(), 2.0 * r);
    let system = System::assemble_in(sigma, grid, config, Some(&region))?;
    let sol = system.solve(g)?;
    sn_from_solution(sigma, ball, &system, &sol)
}

/// The S<N quantities for an already computed solution.
pub fn sn_from_solution(sigma: &DiscreteMeasure, ball: &Ball, system: &System, sol: &Solution) -> Result<SnResult> {
    let grid = &system.grid;
    let n = grid.dim();
    let d = sigma.intrinsic_dim as f64;
    let (h, r) = (grid.h, ball.radius);
    let u = &sol.field.values;
    let strides = grid.strides();
    let tree = KernelTree::new(sigma, system.config.theta)?;
    let beta = system.config.beta;
    let weight_exp = d + 2.0 - n as f64;
    let hn = h.powi(n as i32);
    let mut c = [0usize; MAX_DIM];
    let mut x = vec![0.0; n];
    let mut square_fn = 0.0;
    let mut sup = 0.0f64;
    let usable = |j: usize| system.in_domain(j) && system.mask[j] != CellKind::Collar;
    for i in 0..grid.len() {
        grid.center_into(i, &mut x);
        let rad = x
            .iter()
            .zip(&ball.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if rad <= 2.0 * r && system.in_domain(i) {
            sup = sup.max(u[i].abs());
        }
        if rad >= r || !usable(i) {
            continue;
        }
        grid.coords(i, &mut c);
        let mut g2 = 0.0;
        for a in 0..n {
            let s = strides[a];
            let up = c[a] + 1 < grid.dims[a] && usable(i + s);
            let down = c[a] > 0 && usable(i - s);
            let da = match (up, down) {
                (true, true) => (u[i + s] - u[i - s]) / (2.0 * h),
                (true, false) => (u[i + s] - u[i]) / h,
                (false, true) => (u[i] - u[i - s]) / h,
                (false, false) => 0.0,
            };
            g2 += da * da;
        }
        if g2 > 0.0 {
            let db = tree.d_beta(&x, beta)?;
            square_fn += g2 * db.powf(weight_exp) * hn;
        }
    }
    let mass_b = sigma.mass_in_ball(&ball.center, r);
    let sup2 = sup * sup * mass_b;
    let cones = crate::carleson::ConeFamily::new(2.0)?.truncated(Ball::new(ball.center.clone(), 2.0 * r));
    let nt = crate::carleson::ntmax_field(&sol.field, sigma, &cones)?;
    let vertices = sigma.indices_in_ball(&ball.center, 2.0 * r);
    let mut n_norm2 = 0.0;
    let mut empty = 0;
    for &k in &vertices {
        match nt.values[k] {
            Some(v) => n_norm2 += v * v * sigma.weights[k],
            None => empty += 1,
        }
    }
    Ok(SnResult {
        ball: ball.clone(),
        h,
        square_fn,
        sup2,
        n_norm2,
        ratio_sup: if sup2 > 0.0 { square_fn / sup2 } else { 0.0 },
        ratio_n: if n_norm2 > 0.0 { square_fn / n_norm2 } else { 0.0 },
        vertices: vertices.len(),
        empty_cones: empty,
        iterations: sol.iterations,
        residual: sol.residual,
    })
}
