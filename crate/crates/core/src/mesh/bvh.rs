use crate::camera::Ray;
use crate::math::{self, Aabb, Vec3};
use crate::semantic::SurfaceCaster;

use super::TriMesh;

const LEAF_SIZE: usize = 4;
const BOX_PAD: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f32,
    pub triangle: u32,
    pub point: Vec3,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { bounds: Aabb, start: u32, end: u32 },
    Inner { bounds: Aabb, left: u32, right: u32 },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over a mesh's triangles, split at the centroid
/// median of the longest axis.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
    tris: Vec<[Vec3; 3]>,
}

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        let centroids: Vec<Vec3> = (0..tris.len()).map(|t| mesh.centroid(t)).collect();
        let mut bvh = Self {
            nodes: Vec::new(),
            order: (0..tris.len() as u32).collect(),
            tris,
        };
        if !bvh.tris.is_empty() {
            bvh.build(&centroids, 0, bvh.order.len());
        }
        bvh
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    fn build(&mut self, centroids: &[Vec3], start: usize, end: usize) -> u32 {
        let mut bounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for &v in &self.tris[t as usize] {
                bounds.grow(v);
            }
        }
        for i in 0..3 {
            bounds.min[i] -= BOX_PAD;
            bounds.max[i] += BOX_PAD;
        }
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let ext = bounds.extent();
        let axis = (0..3).max_by(|&a, &b| ext[a].total_cmp(&ext[b])).unwrap_or(0);
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a as usize][axis].total_cmp(&centroids[b as usize][axis])
        });
        self.nodes.push(Node::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        self.nodes[id as usize] = Node::Inner { bounds, left, right };
        id
    }

    /// Nearest intersection with `t` in `[t_near, t_far]`.
    pub fn raycast(&self, ray: &Ray) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f32, u32)> = None;
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            let limit = best.map_or(ray.t_far, |b| b.0);
            match node.bounds().intersect(ray.origin, ray.direction) {
                Some((t0, t1)) if t1 >= ray.t_near && t0 <= limit => {}
                _ => continue,
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[start as usize..end as usize] {
                        if let Some(d) = intersect(ray, &self.tris[t as usize]) {
                            if d >= ray.t_near
                                && d <= best.map_or(ray.t_far, |b| b.0)
                                && best.is_none_or(|b| d < b.0 || (d == b.0 && t < b.1))
                            {
                                best = Some((d, t));
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best.map(|(t, triangle)| Hit {
            t,
            triangle,
            point: ray.at(t),
        })
    }
}

/// Möller–Trumbore ray/triangle test; returns the ray parameter of a hit.
fn intersect(ray: &Ray, tri: &[Vec3; 3]) -> Option<f32> {
    let e1 = math::sub(tri[1], tri[0]);
    let e2 = math::sub(tri[2], tri[0]);
    let p = math::cross(ray.direction, e2);
    let det = math::dot(e1, p);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = math::sub(ray.origin, tri[0]);
    let u = math::dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = math::cross(s, e1);
    let v = math::dot(ray.direction, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(math::dot(e2, q) * inv)
}

impl SurfaceCaster for Bvh {
    fn surface_point(&self, ray: &Ray) -> Option<Vec3> {
        self.raycast(ray).map(|h| h.point)
    }
}
