//! Static 3D kd-tree for exact nearest-neighbor distance queries.
//!
//! Pruning only skips subtrees that provably cannot contain a closer point,
//! and distances are computed with the same expression as a linear scan, so
//! query results equal brute force exactly.

pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// subtree layout: node n has children 2n+1 / 2n+2 over index ranges
    /// produced by recursive median splits of `order`
    order: Vec<u32>,
    axes: Vec<u8>,
}

#[inline]
fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut axes = vec![0u8; n];
        if n > 0 {
            let mut stack = vec![(0usize, n, 0u8)];
            while let Some((lo, hi, axis)) = stack.pop() {
                if hi - lo <= 1 {
                    if hi > lo {
                        axes[lo] = axis;
                    }
                    continue;
                }
                let mid = (lo + hi) / 2;
                order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
                    points[a as usize][axis as usize]
                        .total_cmp(&points[b as usize][axis as usize])
                        .then(a.cmp(&b))
                });
                axes[mid] = axis;
                let next = (axis + 1) % 3;
                stack.push((lo, mid, next));
                stack.push((mid + 1, hi, next));
            }
        }
        Self { points, order, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point. Panics on an empty tree.
    pub fn nearest_sq(&self, q: [f64; 3]) -> f64 {
        assert!(!self.points.is_empty(), "nearest query on empty kd-tree");
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), &mut best);
        best
    }

    /// Nearest distance in the same units as the stored coordinates.
    pub fn nearest(&self, q: [f64; 3]) -> f64 {
        self.nearest_sq(q).sqrt()
    }

    fn search(&self, q: [f64; 3], lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.points[self.order[mid] as usize];
        let d = dist_sq(q, p);
        if d < *best {
            *best = d;
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near_lo, near_hi, far_lo, far_hi) =
            if delta < 0.0 { (lo, mid, mid + 1, hi) } else { (mid + 1, hi, lo, mid) };
        self.search(q, near_lo, near_hi, best);
        if delta * delta < *best {
            self.search(q, far_lo, far_hi, best);
        }
    }
}
