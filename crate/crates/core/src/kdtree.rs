//! Static k-d tree over a flat coordinate buffer.
//!
//! Built once per point cloud and shared read-only by every query. Nodes carry
//! tight bounding boxes, which keeps both Euclidean and sup-norm box queries
//! cheap for the strongly clustered (fractal) clouds used here.

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    // children indices; usize::MAX for leaves
    left: usize,
    right: usize,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    // coordinates in tree order
    coords: Vec<f64>,
    // tree order -> original index
    perm: Vec<usize>,
    nodes: Vec<Node>,
    // per node: [min_0..min_{n-1}, max_0..max_{n-1}]
    bounds: Vec<f64>,
}

impl KdTree {
    /// Builds a tree over `coords`, a row-major buffer of `coords.len() / dim` points.
    pub fn new(coords: &[f64], dim: usize) -> Self {
        assert!(dim > 0 && coords.len() % dim == 0);
        let count = coords.len() / dim;
        let mut perm: Vec<usize> = (0..count).collect();
        let mut tree = KdTree {
            dim,
            coords: Vec::new(),
            perm: Vec::new(),
            nodes: Vec::new(),
            bounds: Vec::new(),
        };
        if count > 0 {
            tree.build(coords, &mut perm, 0, count);
        }
        let mut sorted = Vec::with_capacity(coords.len());
        for &i in &perm {
            sorted.extend_from_slice(&coords[i * dim..(i + 1) * dim]);
        }
        tree.coords = sorted;
        tree.perm = perm;
        tree
    }

    fn build(&mut self, coords: &[f64], perm: &mut [usize], start: usize, end: usize) -> usize {
        let dim = self.dim;
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            left: usize::MAX,
            right: usize::MAX,
        });
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &perm[start..end] {
            for k in 0..dim {
                let v = coords[i * dim + k];
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        self.bounds.extend_from_slice(&lo);
        self.bounds.extend_from_slice(&hi);
        if end - start > LEAF_SIZE {
            let axis = (0..dim)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            if hi[axis] > lo[axis] {
                let mid = (start + end) / 2;
                perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                    coords[a * dim + axis].total_cmp(&coords[b * dim + axis])
                });
                let left = self.build(coords, perm, start, mid);
                let right = self.build(coords, perm, mid, end);
                self.nodes[id].left = left;
                self.nodes[id].right = right;
            }
        }
        id
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn point(&self, slot: usize) -> &[f64] {
        &self.coords[slot * self.dim..(slot + 1) * self.dim]
    }

    #[inline]
    fn node_lo(&self, id: usize) -> &[f64] {
        let b = 2 * self.dim * id;
        &self.bounds[b..b + self.dim]
    }

    #[inline]
    fn node_hi(&self, id: usize) -> &[f64] {
        let b = 2 * self.dim * id;
        &self.bounds[b + self.dim..b + 2 * self.dim]
    }

    /// Squared Euclidean distance from `q` to the bounding box of a node.
    #[inline]
    fn box_dist2(&self, id: usize, q: &[f64]) -> f64 {
        let lo = self.node_lo(id);
        let hi = self.node_hi(id);
        let mut acc = 0.0;
        for k in 0..self.dim {
            let v = q[k];
            let d = if v < lo[k] {
                lo[k] - v
            } else if v > hi[k] {
                v - hi[k]
            } else {
                0.0
            };
            acc += d * d;
        }
        acc
    }

    #[inline]
    fn box_overlaps_cube(&self, id: usize, center: &[f64], half: f64) -> bool {
        let lo = self.node_lo(id);
        let hi = self.node_hi(id);
        (0..self.dim).all(|k| hi[k] >= center[k] - half && lo[k] <= center[k] + half)
    }

    #[inline]
    fn box_inside_cube(&self, id: usize, center: &[f64], half: f64) -> bool {
        let lo = self.node_lo(id);
        let hi = self.node_hi(id);
        (0..self.dim).all(|k| lo[k] >= center[k] - half && hi[k] <= center[k] + half)
    }

    /// Nearest point to `q`: (original index, squared distance).
    pub fn nearest(&self, q: &[f64]) -> Option<(usize, f64)> {
        self.nearest_filtered(q, None)
    }

    /// Nearest point to `q` among points with sup-norm distance at most `half` from `center`.
    pub fn nearest_in_cube(&self, q: &[f64], center: &[f64], half: f64) -> Option<(usize, f64)> {
        self.nearest_filtered(q, Some((center, half)))
    }

    fn nearest_filtered(&self, q: &[f64], cube: Option<(&[f64], f64)>) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if self.box_dist2(id, q) >= best.1 {
                continue;
            }
            if let Some((c, h)) = cube {
                if !self.box_overlaps_cube(id, c, h) {
                    continue;
                }
            }
            let node = &self.nodes[id];
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    let p = self.point(slot);
                    if let Some((c, h)) = cube {
                        if (0..self.dim).any(|k| (p[k] - c[k]).abs() > h) {
                            continue;
                        }
                    }
                    let d2 = dist2(p, q);
                    if d2 < best.1 || (d2 == best.1 && self.perm[slot] < best.0) {
                        best = (self.perm[slot], d2);
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let (dl, dr) = (self.box_dist2(l, q), self.box_dist2(r, q));
                // visit the closer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best.0 != usize::MAX).then_some(best)
    }

    /// True when some point lies in the closed cube of half-side `half` around `center`.
    pub fn any_in_cube(&self, center: &[f64], half: f64) -> bool {
        if self.is_empty() {
            return false;
        }
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if !self.box_overlaps_cube(id, center, half) {
                continue;
            }
            if self.box_inside_cube(id, center, half) {
                return true;
            }
            let node = &self.nodes[id];
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    let p = self.point(slot);
                    if (0..self.dim).all(|k| (p[k] - center[k]).abs() <= half) {
                        return true;
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        false
    }

    /// Calls `visit(index, squared distance)` for every point with |p - q| <= radius.
    pub fn for_each_within(&self, q: &[f64], radius: f64, mut visit: impl FnMut(usize, f64)) {
        if self.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if self.box_dist2(id, q) > r2 {
                continue;
            }
            let node = &self.nodes[id];
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    let d2 = dist2(self.point(slot), q);
                    if d2 <= r2 {
                        visit(self.perm[slot], d2);
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
    }

    /// Indices of points with |p - q| <= radius, in increasing index order.
    pub fn within(&self, q: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, radius, |i, _| out.push(i));
        out.sort_unstable();
        out
    }

    /// Squared distance from `q` to the farthest corner of a node's box.
    #[inline]
    fn box_far2(&self, id: usize, q: &[f64]) -> f64 {
        let lo = self.node_lo(id);
        let hi = self.node_hi(id);
        (0..self.dim)
            .map(|k| (q[k] - lo[k]).abs().max((q[k] - hi[k]).abs()).powi(2))
            .sum()
    }

    /// Scratch buffer for [`KdTree::max_within`]: one slot per node and one per point.
    pub fn max_buffer(&self) -> Vec<f64> {
        vec![f64::NEG_INFINITY; self.nodes.len() + self.len()]
    }

    /// Raises every point with |p - q| <= radius to at least `value`, lazily on whole nodes.
    pub fn max_within(&self, q: &[f64], radius: f64, value: f64, buf: &mut [f64]) {
        if self.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let base = self.nodes.len();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if buf[id] >= value || self.box_dist2(id, q) > r2 {
                continue;
            }
            if self.box_far2(id, q) <= r2 {
                buf[id] = value;
                continue;
            }
            let node = &self.nodes[id];
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    if dist2(self.point(slot), q) <= r2 && buf[base + slot] < value {
                        buf[base + slot] = value;
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
    }

    /// Resolves a [`KdTree::max_within`] buffer into per-point maxima, indexed like the input.
    pub fn resolve_max(&self, buf: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.len()];
        if self.is_empty() {
            return out;
        }
        let base = self.nodes.len();
        let mut stack = vec![(0usize, f64::NEG_INFINITY)];
        while let Some((id, above)) = stack.pop() {
            let m = above.max(buf[id]);
            let node = &self.nodes[id];
            if node.left == usize::MAX {
                for slot in node.start..node.end {
                    out[self.perm[slot]] = m.max(buf[base + slot]);
                }
            } else {
                stack.push((node.left, m));
                stack.push((node.right, m));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
