//! Spatial search structures: a uniform hash grid for fixed-radius
//! neighborhoods and an exact kd-tree for nearest-neighbor queries.
//!
//! Both report point indices in deterministic order regardless of build
//! order or hash iteration, so downstream floating-point accumulations are
//! reproducible run to run.

use std::collections::HashMap;

use nalgebra::Point3;

/// Uniform grid over points, for radius queries where the radius is on the
/// order of the cell size.
pub struct HashGrid {
    cell: f64,
    bins: HashMap<[i64; 3], Vec<u32>>,
}

impl HashGrid {
    /// Bin `points` into cells of edge `cell_size`.
    pub fn build(points: &[Point3<f64>], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let mut bins: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            bins.entry(Self::key(p, cell_size))
                .or_default()
                .push(i as u32);
        }
        HashGrid {
            cell: cell_size,
            bins,
        }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Indices of all points within `radius` (inclusive) of `center`,
    /// ascending. `points` must be the slice the grid was built from.
    pub fn within_radius(
        &self,
        points: &[Point3<f64>],
        center: &Point3<f64>,
        radius: f64,
    ) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let base = Self::key(center, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                    let Some(bin) = self.bins.get(&key) else {
                        continue;
                    };
                    for &i in bin {
                        let d = points[i as usize] - center;
                        if d.norm_squared() <= r2 {
                            out.push(i as usize);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy)]
struct KdNode {
    point: [f64; 3],
    original: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Exact nearest-neighbor search over a fixed point set. Ties in distance
/// resolve to the smallest original index.
pub struct KdTree {
    nodes: Vec<KdNode>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Point3<f64>]) -> Self {
        let mut items: Vec<([f64; 3], u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| ([p.x, p.y, p.z], i as u32))
            .collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(&mut items[..], 0, &mut nodes);
        KdTree { nodes, root }
    }

    fn build_rec(items: &mut [([f64; 3], u32)], depth: usize, nodes: &mut Vec<KdNode>) -> i32 {
        if items.is_empty() {
            return -1;
        }
        let axis = depth % 3;
        let mid = items.len() / 2;
        // Order by coordinate, then original index, so the layout (and hence
        // traversal order) is a pure function of the input points.
        items.select_nth_unstable_by(mid, |a, b| {
            a.0[axis]
                .total_cmp(&b.0[axis])
                .then_with(|| a.1.cmp(&b.1))
        });
        let (point, original) = items[mid];
        let id = nodes.len() as i32;
        nodes.push(KdNode {
            point,
            original,
            axis: axis as u8,
            left: -1,
            right: -1,
        });
        let (lo, rest) = items.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(lo, depth + 1, nodes);
        let right = Self::build_rec(hi, depth + 1, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Index and distance of the nearest point to `q`.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(self.root, &[q.x, q.y, q.z], &mut best);
        Some((best.1 as usize, best.0.sqrt()))
    }

    fn search(&self, node: i32, q: &[f64; 3], best: &mut (f64, u32)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let d2 = (0..3).map(|a| (q[a] - n.point[a]).powi(2)).sum::<f64>();
        if d2 < best.0 || (d2 == best.0 && n.original < best.1) {
            *best = (d2, n.original);
        }
        let axis = n.axis as usize;
        let diff = q[axis] - n.point[axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, best);
        // Visit the far side on exact equality too: an equally distant point
        // with a smaller index may live there.
        if diff * diff <= best.0 {
            self.search(far, q, best);
        }
    }
}
