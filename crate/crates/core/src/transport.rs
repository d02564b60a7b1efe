//! Exact solver for the bounded Lipschitz linear program
//!
//! ```text
//! max Σ m_k f_k   subject to   |f_i - f_j| <= |p_i - p_j|,   |f_k| <= b_k,
//! ```
//!
//! through its dual: a balanced transportation problem in which mass may also be
//! exchanged with a ground node at cost b_k. The transportation problem is
//! solved with the transportation simplex (MODI potentials); the optimal
//! potential is rebuilt from the duals and certified against the primal cost.

use crate::error::{Error, Result};
use crate::kdtree::dist2;

/// Solution of a balanced transportation problem.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub cost: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Transportation simplex on a dense `rows × cols` cost matrix.
///
/// `supply` and `demand` must have equal totals up to rounding; the last demand
/// absorbs the residual imbalance.
pub fn transportation_simplex(
    supply: &[f64],
    demand: &[f64],
    cost: &[f64],
    max_iter: usize,
) -> Result<TransportSolution> {
    let (m, n) = (supply.len(), demand.len());
    assert_eq!(cost.len(), m * n);
    if m == 0 || n == 0 {
        return Ok(TransportSolution {
            cost: 0.0,
            u: vec![0.0; m],
            v: vec![0.0; n],
            iterations: 0,
        });
    }
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    let scale = total_s.abs().max(total_d.abs()).max(f64::MIN_POSITIVE);
    if (total_s - total_d).abs() > 1e-9 * scale {
        return Err(Error::Numeric {
            message: "unbalanced transportation problem".into(),
            residual: total_s - total_d,
        });
    }
    let mut rem_s = supply.to_vec();
    let mut rem_d = demand.to_vec();
    rem_d[n - 1] += total_s - total_d;

    // least-cost initial basis; each allocation retires exactly one line
    let mut order: Vec<u32> = (0..(m * n) as u32).collect();
    order.sort_unstable_by(|&a, &b| cost[a as usize].total_cmp(&cost[b as usize]));
    let mut row_done = vec![false; m];
    let mut col_done = vec![false; n];
    let (mut rows_left, mut cols_left) = (m, n);
    let mut basis: Vec<Cell> = Vec::with_capacity(m + n - 1);
    for &k in &order {
        if basis.len() == m + n - 1 {
            break;
        }
        let (i, j) = (k as usize / n, k as usize % n);
        if row_done[i] || col_done[j] {
            continue;
        }
        let retire_row = if rows_left == 1 {
            false
        } else if cols_left == 1 {
            true
        } else {
            rem_s[i] <= rem_d[j]
        };
        if retire_row {
            let q = rem_s[i].max(0.0);
            basis.push(Cell {
                row: i,
                col: j,
                flow: q,
            });
            rem_d[j] -= q;
            rem_s[i] = 0.0;
            row_done[i] = true;
            rows_left -= 1;
        } else {
            let q = rem_d[j].max(0.0);
            basis.push(Cell {
                row: i,
                col: j,
                flow: q,
            });
            rem_s[i] -= q;
            rem_d[j] = 0.0;
            col_done[j] = true;
            cols_left -= 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    let cmax = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * cmax;
    let nodes = m + n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut seen = vec![false; nodes];
    let mut parent = vec![usize::MAX; nodes];
    let mut stack = Vec::with_capacity(nodes);
    let block = (m / 8).max(1);
    let mut start_row = 0usize;

    let rebuild_adj = |basis: &[Cell], adj: &mut Vec<Vec<usize>>| {
        for a in adj.iter_mut() {
            a.clear();
        }
        for (idx, c) in basis.iter().enumerate() {
            adj[c.row].push(idx);
            adj[m + c.col].push(idx);
        }
    };
    rebuild_adj(&basis, &mut adj);

    let mut iterations = 0;
    loop {
        // potentials by traversal of the basis tree
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(0usize);
        seen[0] = true;
        u[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &idx in &adj[node] {
                let c = basis[idx];
                let (other, val) = if node < m {
                    (m + c.col, cost[c.row * n + c.col] - u[c.row])
                } else {
                    (c.row, cost[c.row * n + c.col] - v[c.col])
                };
                if !seen[other] {
                    seen[other] = true;
                    if other < m {
                        u[other] = val;
                    } else {
                        v[other - m] = val;
                    }
                    stack.push(other);
                }
            }
        }

        // partial Dantzig pricing over blocks of rows
        let mut best = (usize::MAX, usize::MAX, -tol);
        let mut scanned = 0;
        let mut r = start_row;
        while scanned < m {
            let row = &cost[r * n..(r + 1) * n];
            let ur = u[r];
            for (j, &c) in row.iter().enumerate() {
                let red = c - ur - v[j];
                if red < best.2 {
                    best = (r, j, red);
                }
            }
            scanned += 1;
            r = if r + 1 == m { 0 } else { r + 1 };
            if scanned % block == 0 && best.0 != usize::MAX {
                break;
            }
        }
        start_row = r;
        if best.0 == usize::MAX {
            break;
        }
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::Numeric {
                message: format!("transportation simplex exceeded {max_iter} iterations"),
                residual: best.2,
            });
        }
        let (ei, ej) = (best.0, best.1);

        // path in the tree from row node ei to column node m + ej
        seen.iter_mut().for_each(|s| *s = false);
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        stack.clear();
        stack.push(ei);
        seen[ei] = true;
        let target = m + ej;
        while let Some(node) = stack.pop() {
            if node == target {
                break;
            }
            for &idx in &adj[node] {
                let c = basis[idx];
                let other = if node < m { m + c.col } else { c.row };
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = idx;
                    stack.push(other);
                }
            }
        }
        // cells on the path from target back to ei alternate -, +, -, ...
        let mut path = Vec::new();
        let mut node = target;
        while node != ei {
            let idx = parent[node];
            path.push(idx);
            let c = basis[idx];
            node = if node < m { m + c.col } else { c.row };
        }
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &idx) in path.iter().enumerate() {
            if k % 2 == 0 && basis[idx].flow < theta {
                theta = basis[idx].flow;
                leave = idx;
            }
        }
        for (k, &idx) in path.iter().enumerate() {
            if k % 2 == 0 {
                basis[idx].flow -= theta;
            } else {
                basis[idx].flow += theta;
            }
        }
        basis[leave] = Cell {
            row: ei,
            col: ej,
            flow: theta,
        };
        rebuild_adj(&basis, &mut adj);
    }

    let total: f64 = basis.iter().map(|c| c.flow * cost[c.row * n + c.col]).sum();
    Ok(TransportSolution {
        cost: total,
        u,
        v,
        iterations,
    })
}

/// Optimum of the bounded Lipschitz program and a certified optimal potential.
#[derive(Debug, Clone)]
pub struct BoundedLipschitz {
    pub value: f64,
    /// Potential on every input point.
    pub potential: Vec<f64>,
    pub iterations: usize,
    /// |Σ m F - transport cost|, the strong-duality gap of the recovered potential.
    pub duality_gap: f64,
}

/// Solves max Σ m_k f_k over f with |f_i - f_j| <= |p_i - p_j| and |f_k| <= b_k.
///
/// `points` is row-major in dimension `dim`; the bounds must be 1-Lipschitz in p
/// (as max(0, r - |p - x|) is), which makes the ground-node reduction exact.
pub fn bounded_lipschitz(
    points: &[f64],
    dim: usize,
    mass: &[f64],
    bound: &[f64],
    max_iter: usize,
) -> Result<BoundedLipschitz> {
    let count = mass.len();
    assert_eq!(points.len(), count * dim);
    assert_eq!(bound.len(), count);
    let pt = |k: usize| &points[k * dim..(k + 1) * dim];
    let pos: Vec<usize> = (0..count).filter(|&k| mass[k] > 0.0 && bound[k] > 0.0).collect();
    let neg: Vec<usize> = (0..count).filter(|&k| mass[k] < 0.0 && bound[k] > 0.0).collect();
    let mut potential = vec![0.0; count];
    if pos.is_empty() && neg.is_empty() {
        return Ok(BoundedLipschitz {
            value: 0.0,
            potential,
            iterations: 0,
            duality_gap: 0.0,
        });
    }
    let pos_total: f64 = pos.iter().map(|&k| mass[k]).sum();
    let neg_total: f64 = neg.iter().map(|&k| -mass[k]).sum();
    let (m, n) = (pos.len() + 1, neg.len() + 1);
    let mut supply: Vec<f64> = pos.iter().map(|&k| mass[k]).collect();
    supply.push(neg_total);
    let mut demand: Vec<f64> = neg.iter().map(|&k| -mass[k]).collect();
    demand.push(pos_total);
    let mut cost = vec![0.0; m * n];
    for (a, &i) in pos.iter().enumerate() {
        for (b, &j) in neg.iter().enumerate() {
            let d = dist2(pt(i), pt(j)).sqrt();
            cost[a * n + b] = d.min(bound[i] + bound[j]);
        }
        cost[a * n + n - 1] = bound[i];
    }
    for (b, &j) in neg.iter().enumerate() {
        cost[(m - 1) * n + b] = bound[j];
    }
    let sol = transportation_simplex(&supply, &demand, &cost, max_iter)?;

    // recover f on sinks, then extend by the largest admissible function below it
    let ug = sol.u[m - 1];
    let sink_vals: Vec<f64> = (0..neg.len()).map(|b| -(sol.v[b] + ug)).collect();
    for k in 0..count {
        if bound[k] <= 0.0 {
            continue;
        }
        let mut f = bound[k];
        for (b, &j) in neg.iter().enumerate() {
            f = f.min(sink_vals[b] + dist2(pt(k), pt(j)).sqrt());
        }
        potential[k] = f;
    }
    let value: f64 = (0..count).map(|k| mass[k] * potential[k]).sum();
    let gap = (value - sol.cost).abs();
    let scale = (pos_total + neg_total) * bound.iter().fold(0.0f64, |a, &b| a.max(b));
    if gap > 1e-7 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric {
            message: "recovered potential does not attain the transport cost".into(),
            residual: gap,
        });
    }
    Ok(BoundedLipschitz {
        value: sol.cost,
        potential,
        iterations: sol.iterations,
        duality_gap: gap,
    })
}
