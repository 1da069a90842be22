//! Bounding volume hierarchy for nearest-primitive queries.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: range into `prims`. Interior: `start` is the left child, `count == 0`.
    start: usize,
    count: usize,
    right: usize,
}

/// Axis-aligned BVH over primitive bounding boxes, built by median splits.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    prims: Vec<usize>,
}

fn box_dist2(lo: &Vec3, hi: &Vec3, p: &Vec3) -> f64 {
    let mut d = 0.0;
    for a in 0..3 {
        let t = (lo[a] - p[a]).max(0.0).max(p[a] - hi[a]);
        d += t * t;
    }
    d
}

impl Bvh {
    pub fn build(boxes: &[(Vec3, Vec3)]) -> Self {
        let mut bvh = Bvh {
            nodes: Vec::new(),
            prims: (0..boxes.len()).collect(),
        };
        if !boxes.is_empty() {
            let centers: Vec<Vec3> = boxes.iter().map(|(lo, hi)| (lo + hi) * 0.5).collect();
            bvh.build_node(boxes, &centers, 0, boxes.len());
        }
        bvh
    }

    pub fn from_triangles(positions: &[Vec3], faces: &[[usize; 3]]) -> Self {
        let boxes: Vec<_> = faces
            .iter()
            .map(|&[a, b, c]| {
                let (pa, pb, pc) = (positions[a], positions[b], positions[c]);
                (pa.inf(&pb).inf(&pc), pa.sup(&pb).sup(&pc))
            })
            .collect();
        Self::build(&boxes)
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        let boxes: Vec<_> = points.iter().map(|p| (*p, *p)).collect();
        Self::build(&boxes)
    }

    fn build_node(&mut self, boxes: &[(Vec3, Vec3)], centers: &[Vec3], start: usize, end: usize) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut clo = lo;
        let mut chi = hi;
        for &p in &self.prims[start..end] {
            lo = lo.inf(&boxes[p].0);
            hi = hi.sup(&boxes[p].1);
            clo = clo.inf(&centers[p]);
            chi = chi.sup(&centers[p]);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            count: end - start,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return index;
        }
        let extent = chi - clo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.prims[start..end].sort_by(|&a, &b| {
            centers[a][axis]
                .total_cmp(&centers[b][axis])
                .then(a.cmp(&b))
        });
        let left = self.build_node(boxes, centers, start, mid);
        let right = self.build_node(boxes, centers, mid, end);
        let node = &mut self.nodes[index];
        node.start = left;
        node.count = 0;
        node.right = right;
        index
    }

    /// Primitive minimizing `dist2(prim)` with the lowest index among exact
    /// ties. `dist2` must be bounded below by the squared distance from `p` to
    /// the primitive's bounding box.
    pub fn nearest<F: FnMut(usize) -> f64>(&self, p: &Vec3, mut dist2: F) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = vec![(0usize, box_dist2(&self.nodes[0].lo, &self.nodes[0].hi, p))];
        while let Some((n, d)) = stack.pop() {
            if d > best.1 {
                continue;
            }
            let node = &self.nodes[n];
            if node.count > 0 {
                for &prim in &self.prims[node.start..node.start + node.count] {
                    let dp = dist2(prim);
                    if dp < best.1 || (dp == best.1 && prim < best.0) {
                        best = (prim, dp);
                    }
                }
            } else {
                let (l, r) = (node.start, node.right);
                let dl = box_dist2(&self.nodes[l].lo, &self.nodes[l].hi, p);
                let dr = box_dist2(&self.nodes[r].lo, &self.nodes[r].hi, p);
                // push the farther child first so the nearer one is visited first
                if dl <= dr {
                    stack.push((r, dr));
                    stack.push((l, dl));
                } else {
                    stack.push((l, dl));
                    stack.push((r, dr));
                }
            }
        }
        Some(best)
    }
}

/// Closest point on triangle `abc` to `p`, with its barycentric coordinates.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> (Vec3, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        let (q, bary) = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        assert!((bary[0] - 0.6).abs() < 1e-15);
        let (q, _) = closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert_eq!(q, a);
        let (q, _) = closest_point_on_triangle(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn point_bvh_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let bvh = Bvh::from_points(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let (i, d) = bvh.nearest(&q, |k| (pts[k] - q).norm_squared()).unwrap();
            let (j, e) = pts
                .iter()
                .enumerate()
                .map(|(k, p)| (k, (p - q).norm_squared()))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .unwrap();
            assert_eq!((i, d), (j, e));
        }
    }
}
