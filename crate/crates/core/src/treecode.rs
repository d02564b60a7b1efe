//! Hierarchical evaluation of the kernel sum S_e(X) = Σ w |X-p|^{-e}.
//!
//! Clusters that look small from X (radius below θ times the distance to
//! their centroid) are replaced by their monopole plus quadrupole term; the
//! remaining error is third order in θ. Used wherever D_β is needed on every
//! cell or face of a grid.

use crate::distances::{ray_sums, Power};
use crate::error::{Error, Result};
use crate::geometry::DiscreteMeasure;

const LEAF: usize = 12;

struct Cluster {
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
    weight: f64,
    radius: f64,
}

pub struct KernelTree<'a> {
    sigma: &'a DiscreteMeasure,
    theta: f64,
    n: usize,
    // points and weights in cluster order
    coords: Vec<f64>,
    weights: Vec<f64>,
    clusters: Vec<Cluster>,
    centroids: Vec<f64>,
    // row-major n×n second moments about the centroid
    moments: Vec<f64>,
}

impl<'a> KernelTree<'a> {
    pub fn new(sigma: &'a DiscreteMeasure, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Parameter(format!(
                "opening angle must lie in (0, 1), got {theta}"
            )));
        }
        let n = sigma.ambient_dim;
        let mut order: Vec<usize> = (0..sigma.len()).collect();
        let mut tree = KernelTree {
            sigma,
            theta,
            n,
            coords: Vec::new(),
            weights: Vec::new(),
            clusters: Vec::new(),
            centroids: Vec::new(),
            moments: Vec::new(),
        };
        tree.build(&mut order, 0, sigma.len());
        tree.coords = order.iter().flat_map(|&i| sigma.point(i).iter().copied()).collect();
        tree.weights = order.iter().map(|&i| sigma.weights[i]).collect();
        Ok(tree)
    }

    fn build(&mut self, order: &mut [usize], start: usize, end: usize) -> usize {
        let n = self.n;
        let s = self.sigma;
        let weight: f64 = order[start..end].iter().map(|&i| s.weights[i]).sum();
        let mut c = vec![0.0; n];
        for &i in &order[start..end] {
            for a in 0..n {
                c[a] += s.weights[i] * s.point(i)[a] / weight;
            }
        }
        let mut m = vec![0.0; n * n];
        let mut radius = 0.0f64;
        let (mut lo, mut hi) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
        for &i in &order[start..end] {
            let p = s.point(i);
            let mut r2 = 0.0;
            for a in 0..n {
                let qa = p[a] - c[a];
                r2 += qa * qa;
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
                for b in 0..n {
                    m[a * n + b] += s.weights[i] * qa * (p[b] - c[b]);
                }
            }
            radius = radius.max(r2.sqrt());
        }
        let id = self.clusters.len();
        self.clusters.push(Cluster {
            start,
            end,
            children: None,
            weight,
            radius,
        });
        self.centroids.extend_from_slice(&c);
        self.moments.extend_from_slice(&m);
        if end - start > LEAF {
            let axis = (0..n)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            if hi[axis] > lo[axis] {
                let mid = (start + end) / 2;
                order[start..end]
                    .select_nth_unstable_by(mid - start, |&a, &b| s.point(a)[axis].total_cmp(&s.point(b)[axis]));
                let left = self.build(order, start, mid);
                let right = self.build(order, mid, end);
                self.clusters[id].children = Some((left, right));
            }
        }
        id
    }

    /// S_e(X) over the support and the completion rays.
    pub fn sum(&self, x: &[f64], e: f64) -> Result<f64> {
        let n = self.n;
        let pw = Power::new(e);
        let theta2 = self.theta * self.theta;
        let mut total = 0.0;
        let mut stack = vec![0usize];
        let mut r = [0.0f64; 8];
        while let Some(id) = stack.pop() {
            let cl = &self.clusters[id];
            let c = &self.centroids[id * n..(id + 1) * n];
            let mut r2 = 0.0;
            for a in 0..n {
                r[a] = x[a] - c[a];
                r2 += r[a] * r[a];
            }
            if cl.radius * cl.radius < theta2 * r2 {
                let m = &self.moments[id * n * n..(id + 1) * n * n];
                let mut rmr = 0.0;
                let mut trace = 0.0;
                for a in 0..n {
                    trace += m[a * n + a];
                    for b in 0..n {
                        rmr += r[a] * m[a * n + b] * r[b];
                    }
                }
                let f = pw.eval(r2);
                total += cl.weight * f + 0.5 * e * f / r2 * ((e + 2.0) * rmr / r2 - trace);
            } else if let Some((left, right)) = cl.children {
                stack.push(left);
                stack.push(right);
            } else {
                for slot in cl.start..cl.end {
                    let p = &self.coords[slot * n..(slot + 1) * n];
                    let mut d2 = 0.0;
                    for a in 0..n {
                        let v = x[a] - p[a];
                        d2 += v * v;
                    }
                    if d2 == 0.0 {
                        return Err(Error::Resolution("kernel evaluated on a support point".into()));
                    }
                    total += self.weights[slot] * pw.eval(d2);
                }
            }
        }
        let mut scratch = vec![0.0; n];
        for ray in &self.sigma.completion {
            total += ray_sums(ray, x, e, false, &mut scratch)?;
        }
        Ok(total)
    }

    /// D_β(X) = S_{d+β}(X)^{-1/β}.
    pub fn d_beta(&self, x: &[f64], beta: f64) -> Result<f64> {
        let d = self.sigma.intrinsic_dim as f64;
        Ok(self.sum(x, d + beta)?.powf(-1.0 / beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distances::Kernel;
    use crate::geometry::{make_cantor_set, make_lipschitz_graph, sawtooth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn compare(sigma: &DiscreteMeasure, theta: f64, tol: f64) {
        let tree = KernelTree::new(sigma, theta).unwrap();
        let kernel = Kernel::new(sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = sigma.ambient_dim;
        let mut checked = 0;
        while checked < 200 {
            let i = rng.gen_range(0..sigma.len());
            let mut x = sigma.point(i).to_vec();
            let scale = 10f64.powf(rng.gen_range(-2.0..0.0));
            for v in x.iter_mut().take(n) {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
            if sigma.dist_to_gamma(&x) < 2.0 * sigma.spacing {
                continue;
            }
            checked += 1;
            for e in [2.0, 2.5, 3.0] {
                let exact = kernel.sums(&x, e, false).unwrap().0;
                let fast = tree.sum(&x, e).unwrap();
                assert!((fast - exact).abs() <= tol * exact, "e={e} x={x:?}: {fast} vs {exact}");
            }
        }
    }

    #[test]
    fn matches_direct_sum_on_a_graph() {
        let s = make_lipschitz_graph(3, 1, &sawtooth(0.5, 0.1, 2), 0.5, 1.0, 1.0 / 512.0).unwrap();
        compare(&s, 0.05, 1e-4);
        compare(&s, 0.15, 1e-3);
    }

    #[test]
    fn matches_direct_sum_on_a_cantor_set() {
        let s = make_cantor_set(5).unwrap();
        compare(&s, 0.05, 1e-4);
        compare(&s, 0.15, 1e-3);
    }

    #[test]
    fn opening_angle_is_checked() {
        let s = make_cantor_set(2).unwrap();
        assert!(KernelTree::new(&s, 1.5).is_err());
    }
}
