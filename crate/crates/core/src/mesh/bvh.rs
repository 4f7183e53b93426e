//! Median-split bounding volume hierarchy and watertight ray/triangle tests.

use super::{Aabb, TriangleMesh};
use crate::geom::Vec3;

pub const MAX_LEAF_SIZE: usize = 8;
const MIN_T: f64 = 1e-6;

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub triangle_id: u32,
    /// Weights of the triangle's three corners, in index order.
    pub barycentric: Vec3,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: u32, len: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Binary tree of axis-aligned boxes over triangle indices.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let n = mesh.triangle_count();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let boxes: Vec<Aabb> = (0..n)
            .map(|i| {
                let mut b = Aabb::empty();
                for c in mesh.corners(i) {
                    b.grow(&c);
                }
                pad(b)
            })
            .collect();
        let centroids: Vec<Vec3> = boxes.iter().map(|b| (b.min + b.max) * 0.5).collect();
        let mut nodes = Vec::with_capacity(2 * n / MAX_LEAF_SIZE + 1);
        if n > 0 {
            build_node(&mut nodes, &mut order, 0, &boxes, &centroids);
        }
        Self { nodes, order }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Checks the structural invariants: each triangle in exactly one leaf, leaves
    /// hold at most [`MAX_LEAF_SIZE`] triangles, parents enclose their children.
    pub fn check_invariants(&self, triangle_count: usize) -> Result<(), String> {
        let mut seen = vec![0u32; triangle_count];
        for node in &self.nodes {
            match node.kind {
                NodeKind::Leaf { start, len } => {
                    if len as usize > MAX_LEAF_SIZE {
                        return Err(format!("leaf with {len} triangles"));
                    }
                    for &t in &self.order[start as usize..(start + len) as usize] {
                        seen[t as usize] += 1;
                    }
                }
                NodeKind::Inner { left, right } => {
                    for child in [left, right] {
                        if !node.bounds.contains_box(&self.nodes[child as usize].bounds) {
                            return Err("child box escapes its parent".into());
                        }
                    }
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(t) => Err(format!("triangle {t} appears in {} leaves", seen[t])),
            None => Ok(()),
        }
    }
}

fn pad(mut b: Aabb) -> Aabb {
    let eps = 1e-9 * (1.0 + b.min.amax().abs().max(b.max.amax().abs()));
    b.min -= Vec3::repeat(eps);
    b.max += Vec3::repeat(eps);
    b
}

fn build_node(nodes: &mut Vec<Node>, order: &mut [u32], start: usize, boxes: &[Aabb], centroids: &[Vec3]) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cbounds = Aabb::empty();
    for &t in order.iter() {
        bounds = bounds.merge(&boxes[t as usize]);
        cbounds.grow(&centroids[t as usize]);
    }
    let index = nodes.len() as u32;
    if order.len() <= MAX_LEAF_SIZE {
        nodes.push(Node {
            bounds,
            kind: NodeKind::Leaf {
                start: start as u32,
                len: order.len() as u32,
            },
        });
        return index;
    }
    let extent = cbounds.extent();
    let axis = (0..3).max_by(|&a, &b| extent[a].total_cmp(&extent[b])).unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf { start: 0, len: 0 },
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(nodes, lo, start, boxes, centroids);
    let right = build_node(nodes, hi, start + mid, boxes, centroids);
    nodes[index as usize].kind = NodeKind::Inner { left, right };
    index
}

/// Entry distance of a ray into a box, or `None` on a miss or when the box lies
/// entirely behind `t_max`.
#[inline]
fn slab(b: &Aabb, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
    let mut lo = 0.0f64;
    let mut hi = t_max;
    for i in 0..3 {
        let t1 = (b.min[i] - origin[i]) * inv_dir[i];
        let t2 = (b.max[i] - origin[i]) * inv_dir[i];
        // NaN (origin on a slab plane of a parallel ray) leaves the interval untouched.
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (lo <= hi).then_some(lo)
}

/// Watertight ray/triangle intersection (shear-and-scale formulation).
#[inline]
pub(crate) fn intersect_triangle(corners: &[Vec3; 3], origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
    let kz = (0..3).max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs())).unwrap();
    let mut kx = (kz + 1) % 3;
    let mut ky = (kx + 1) % 3;
    if dir[kz] < 0.0 {
        std::mem::swap(&mut kx, &mut ky);
    }
    let sx = dir[kx] / dir[kz];
    let sy = dir[ky] / dir[kz];
    let sz = 1.0 / dir[kz];

    let a = corners[0] - origin;
    let b = corners[1] - origin;
    let c = corners[2] - origin;
    let (ax, ay) = (a[kx] - sx * a[kz], a[ky] - sy * a[kz]);
    let (bx, by) = (b[kx] - sx * b[kz], b[ky] - sy * b[kz]);
    let (cx, cy) = (c[kx] - sx * c[kz], c[ky] - sy * c[kz]);

    let u = cx * by - cy * bx;
    let v = ax * cy - ay * cx;
    let w = bx * ay - by * ax;
    if (u < 0.0 || v < 0.0 || w < 0.0) && (u > 0.0 || v > 0.0 || w > 0.0) {
        return None;
    }
    let det = u + v + w;
    if det == 0.0 {
        return None;
    }
    let t_scaled = u * sz * a[kz] + v * sz * b[kz] + w * sz * c[kz];
    let t = t_scaled / det;
    if !(t > MIN_T) || !t.is_finite() {
        return None;
    }
    Some((t, Vec3::new(u / det, v / det, w / det)))
}

#[inline]
fn better(candidate: &Hit, best: &Option<Hit>) -> bool {
    match best {
        None => true,
        Some(b) => candidate.t < b.t || (candidate.t == b.t && candidate.triangle_id < b.triangle_id),
    }
}

/// Nearest hit with `t > 1e-6` using the BVH. Ties in `t` go to the lower triangle id.
pub fn raycast(mesh: &TriangleMesh, bvh: &Bvh, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    if bvh.nodes.is_empty() {
        return None;
    }
    let inv_dir = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
    let mut best: Option<Hit> = None;
    let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
    if let Some(t) = slab(&bvh.nodes[0].bounds, origin, &inv_dir, f64::INFINITY) {
        stack.push((0, t));
    }
    while let Some((idx, t_enter)) = stack.pop() {
        if let Some(b) = &best {
            if t_enter > b.t {
                continue;
            }
        }
        let limit = best.map_or(f64::INFINITY, |b| b.t);
        match bvh.nodes[idx as usize].kind {
            NodeKind::Leaf { start, len } => {
                for &tri in &bvh.order[start as usize..(start + len) as usize] {
                    if let Some((t, bary)) = intersect_triangle(&mesh.corners(tri as usize), origin, dir) {
                        let hit = Hit {
                            t,
                            triangle_id: tri,
                            barycentric: bary,
                        };
                        if better(&hit, &best) {
                            best = Some(hit);
                        }
                    }
                }
            }
            NodeKind::Inner { left, right } => {
                let tl = slab(&bvh.nodes[left as usize].bounds, origin, &inv_dir, limit);
                let tr = slab(&bvh.nodes[right as usize].bounds, origin, &inv_dir, limit);
                match (tl, tr) {
                    (Some(a), Some(b)) => {
                        // Visit the nearer child first.
                        if a <= b {
                            stack.push((right, b));
                            stack.push((left, a));
                        } else {
                            stack.push((left, a));
                            stack.push((right, b));
                        }
                    }
                    (Some(a), None) => stack.push((left, a)),
                    (None, Some(b)) => stack.push((right, b)),
                    (None, None) => {}
                }
            }
        }
    }
    best
}

/// Reference implementation testing every triangle.
pub fn raycast_brute_force(mesh: &TriangleMesh, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
    let mut best = None;
    for tri in 0..mesh.triangle_count() {
        if let Some((t, bary)) = intersect_triangle(&mesh.corners(tri), origin, dir) {
            let hit = Hit {
                t,
                triangle_id: tri as u32,
                barycentric: bary,
            };
            if better(&hit, &best) {
                best = Some(hit);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_soup(n: usize, seed: u64) -> TriangleMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vertices = Vec::new();
        let mut tris = Vec::new();
        for i in 0..n {
            let c = Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            for _ in 0..3 {
                vertices.push(
                    c + Vec3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ),
                );
            }
            let b = 3 * i as u32;
            tris.push([b, b + 1, b + 2]);
        }
        TriangleMesh::new(vertices, tris, None).unwrap()
    }

    #[test]
    fn unit_square_hit_and_miss() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let mesh = TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], None).unwrap();
        let bvh = Bvh::build(&mesh);
        let down = Vec3::new(0.0, 0.0, -1.0);
        let hit = raycast(&mesh, &bvh, &Vec3::new(0.5, 0.5, 10.0), &down).unwrap();
        assert_eq!(hit.t, 10.0);
        let p = Vec3::new(0.5, 0.5, 10.0) + down * hit.t;
        assert_eq!(p.z, 0.0);
        assert!(raycast(&mesh, &bvh, &Vec3::new(1.5, 0.5, 10.0), &down).is_none());
    }

    #[test]
    fn shared_edge_is_not_a_crack() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let mesh = TriangleMesh::new(v, vec![[0, 1, 2], [0, 2, 3]], None).unwrap();
        let bvh = Bvh::build(&mesh);
        for i in 1..100 {
            let s = i as f64 / 100.0;
            let hit = raycast(&mesh, &bvh, &Vec3::new(s, s, 1.0), &Vec3::new(0.0, 0.0, -1.0));
            assert!(hit.is_some(), "crack at diagonal {s}");
        }
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mesh = random_soup(500, 1);
        let bvh = Bvh::build(&mesh);
        bvh.check_invariants(mesh.triangle_count()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = 0;
        for _ in 0..1000 {
            let origin = Vec3::new(
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
            );
            let target = Vec3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let dir = (target - origin).normalize();
            let a = raycast(&mesh, &bvh, &origin, &dir);
            let b = raycast_brute_force(&mesh, &origin, &dir);
            assert_eq!(a.map(|h| h.triangle_id), b.map(|h| h.triangle_id));
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a.t - b.t).abs() <= 1e-9);
                hits += 1;
            }
        }
        assert!(hits > 200, "only {hits} hits, fixture too sparse");
    }

    #[test]
    fn axis_parallel_rays_on_box_planes() {
        let mesh = random_soup(64, 5);
        let bvh = Bvh::build(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let origin = Vec3::new(rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), 30.0);
            let dir = Vec3::new(0.0, 0.0, -1.0);
            assert_eq!(
                raycast(&mesh, &bvh, &origin, &dir).map(|h| h.triangle_id),
                raycast_brute_force(&mesh, &origin, &dir).map(|h| h.triangle_id)
            );
        }
    }

    #[test]
    fn empty_bvh() {
        let mesh = TriangleMesh::empty();
        let bvh = Bvh::build(&mesh);
        assert!(raycast(&mesh, &bvh, &Vec3::zeros(), &Vec3::z()).is_none());
    }
}
