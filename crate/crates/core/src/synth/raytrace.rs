use nalgebra::Vector3;

/// Nearest intersection of a ray with a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleHit {
    pub t: f64,
    pub triangle: usize,
    /// Weights of the three corners.
    pub bary: [f64; 3],
}

/// Möller–Trumbore intersection. Hits on edges and corners count; rays
/// parallel to the plane and degenerate triangles never hit.
pub fn ray_triangle_intersect(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    tri: [&Vector3<f64>; 3],
) -> Option<(f64, [f64; 3])> {
    let [a, b, c] = tri;
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm() * d.norm();
    if det.abs() <= 1e-12 * scale || scale == 0.0 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if u < 0.0 || u > 1.0 {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some((t, [1.0 - u - v, u, v]))
}

fn closer(a: &Option<TriangleHit>, t: f64, i: usize) -> bool {
    match a {
        None => true,
        Some(h) => t < h.t || (t == h.t && i < h.triangle),
    }
}

/// Exhaustive scan over every triangle.
pub fn brute_force_intersect(
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
    o: &Vector3<f64>,
    d: &Vector3<f64>,
) -> Option<TriangleHit> {
    let mut best = None;
    for (i, f) in faces.iter().enumerate() {
        let tri = f.map(|k| &vertices[k as usize]);
        if let Some((t, bary)) = ray_triangle_intersect(o, d, tri) {
            if closer(&best, t, i) {
                best = Some(TriangleHit { t, triangle: i, bary });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Vector3::repeat(f64::INFINITY),
            hi: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.lo = self.lo.inf(&o.lo);
        self.hi = self.hi.sup(&o.hi);
    }

    /// Entry distance of the ray, if it meets the box before `t_max`.
    fn entry(&self, o: &Vector3<f64>, inv_d: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.lo[k] - o[k]) * inv_d[k];
            let b = (self.hi[k] - o[k]) * inv_d[k];
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            // NaN from 0 * inf (ray in a slab plane) must not shrink the interval
            if near > t0 {
                t0 = near;
            }
            if far < t1 {
                t1 = far;
            }
        }
        // small slack so hits exactly on a box face are not culled
        (t0 <= t1 * (1.0 + 1e-12) + 1e-12).then_some(t0)
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first triangle slot; interior: index of the left child (the
    /// right child follows its whole subtree, stored in `right`).
    start: usize,
    len: usize,
    right: usize,
}

/// Bounding volume hierarchy over a triangle mesh, median split on the
/// widest centroid axis.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(vertices: &[Vector3<f64>], faces: &[[u32; 3]]) -> Self {
        let boxes: Vec<Aabb> = faces
            .iter()
            .map(|f| {
                let mut b = Aabb::empty();
                for &k in f {
                    b.grow(&vertices[k as usize]);
                }
                b
            })
            .collect();
        let centroids: Vec<Vector3<f64>> = boxes.iter().map(|b| (b.lo + b.hi) * 0.5).collect();
        let mut order: Vec<usize> = (0..faces.len()).collect();
        let mut nodes = Vec::new();
        if !faces.is_empty() {
            Self::split(&mut nodes, &mut order, 0, faces.len(), &boxes, &centroids);
        }
        Self { nodes, order }
    }

    fn split(
        nodes: &mut Vec<Node>,
        order: &mut [usize],
        start: usize,
        end: usize,
        boxes: &[Aabb],
        centroids: &[Vector3<f64>],
    ) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &i in &order[start..end] {
            bounds.merge(&boxes[i]);
            cb.grow(&centroids[i]);
        }
        let id = nodes.len();
        nodes.push(Node {
            bounds,
            start,
            len: end - start,
            right: 0,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        Self::split(nodes, order, start, mid, boxes, centroids);
        let right = Self::split(nodes, order, mid, end, boxes, centroids);
        nodes[id].len = 0;
        nodes[id].right = right;
        id
    }

    pub fn intersect(
        &self,
        vertices: &[Vector3<f64>],
        faces: &[[u32; 3]],
        o: &Vector3<f64>,
        d: &Vector3<f64>,
    ) -> Option<TriangleHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv_d = d.map(|v| 1.0 / v);
        let mut best: Option<TriangleHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let t_max = best.map_or(f64::INFINITY, |h| h.t);
            if node.bounds.entry(o, &inv_d, t_max).is_none() {
                continue;
            }
            if node.len > 0 {
                for &i in &self.order[node.start..node.start + node.len] {
                    let tri = faces[i].map(|k| &vertices[k as usize]);
                    if let Some((t, bary)) = ray_triangle_intersect(o, d, tri) {
                        if closer(&best, t, i) {
                            best = Some(TriangleHit { t, triangle: i, bary });
                        }
                    }
                }
            } else {
                let (l, r) = (n + 1, node.right);
                let tl = self.nodes[l].bounds.entry(o, &inv_d, t_max);
                let tr = self.nodes[r].bounds.entry(o, &inv_d, t_max);
                // push the farther child first so the nearer one is visited first
                match (tl, tr) {
                    (Some(a), Some(b)) if a <= b => stack.extend([r, l]),
                    (Some(_), Some(_)) => stack.extend([l, r]),
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }
}
