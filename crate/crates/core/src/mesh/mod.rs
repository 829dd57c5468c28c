//! Triangle meshes: marching-cubes extraction, ray casting, mask projection
//! and OBJ/PLY exchange.

mod bvh;
mod io;
mod select;
mod tables;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::math::{self, Aabb, Vec3};
use crate::radiance::RadianceField;
use crate::scene::SceneSpec;

pub use bvh::{Bvh, Hit};
pub use io::{read_obj, read_ply, write_obj, write_ply};
pub use select::{extract_selected, project_mask, track_click, ClickView, SelectionState, TrackedClick};

/// Default iso-level for extraction, in density units.
pub const SIGMA_THRESHOLD: f32 = 5.0;

/// A scalar density over a bounded region.
pub trait DensityField: Sync {
    fn density(&self, p: Vec3) -> f32;
    fn bounds(&self) -> Aabb;
}

impl DensityField for SceneSpec {
    fn density(&self, p: Vec3) -> f32 {
        SceneSpec::density(self, p)
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

impl DensityField for RadianceField {
    fn density(&self, p: Vec3) -> f32 {
        self.query_density(p)
    }

    fn bounds(&self) -> Aabb {
        RadianceField::bounds(self)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-triangle object label.
    pub object_ids: Option<Vec<u32>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(contract(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(Self {
            vertices,
            triangles,
            object_ids: None,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.corners(t);
        math::scale(math::add(math::add(a, b), c), 1.0 / 3.0)
    }

    pub fn area(&self, t: usize) -> f32 {
        let [a, b, c] = self.corners(t);
        0.5 * math::norm(math::cross(math::sub(b, a), math::sub(c, a)))
    }

    pub fn bounding_box(&self) -> Aabb {
        let mut b = Aabb::empty();
        for &v in &self.vertices {
            b.grow(v);
        }
        b
    }

    /// Drops triangles with repeated indices or zero area.
    pub fn remove_degenerate(&mut self) {
        let keep: Vec<bool> = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangles[t];
                a != b && b != c && a != c && self.area(t) > 1e-12
            })
            .collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap());
        if let Some(ids) = &mut self.object_ids {
            let mut k = keep.iter();
            ids.retain(|_| *k.next().unwrap());
        }
    }

    /// Number of vertex-connected groups of triangles.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<u32> = (0..self.vertices.len() as u32).collect();
        fn find(p: &mut [u32], mut x: u32) -> u32 {
            while p[x as usize] != x {
                p[x as usize] = p[p[x as usize] as usize];
                x = p[x as usize];
            }
            x
        }
        for t in &self.triangles {
            for &j in &t[1..] {
                let (a, b) = (find(&mut parent, t[0]), find(&mut parent, j));
                if a != b {
                    parent[a as usize] = b;
                }
            }
        }
        let mut roots: Vec<u32> = self.triangles.iter().map(|t| find(&mut parent, t[0])).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// True when every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !edges.is_empty() && edges.values().all(|&c| c == 2)
    }

    /// Labels each triangle with the scene object nearest its centroid.
    pub fn label_objects(&mut self, scene: &SceneSpec) {
        let ids = (0..self.triangles.len())
            .map(|t| scene.nearest(self.centroid(t)).1)
            .collect();
        self.object_ids = Some(ids);
    }
}

/// Marching cubes over `field` sampled on a `resolution`^3 lattice spanning
/// its bounds, at iso-level `level`. Shared edge vertices are welded and
/// placed on the field's own crossing along each edge; triangles face away
/// from the dense side. A field that never reaches `level` gives
/// [`Error::EmptySurface`].
pub fn extract_mesh(field: &dyn DensityField, resolution: usize, level: f32) -> Result<TriMesh> {
    if resolution < 2 {
        return Err(contract("marching cubes needs at least 2 samples per axis"));
    }
    let n = resolution;
    let bounds = field.bounds();
    let cell = math::scale(bounds.extent(), 1.0 / (n - 1) as f32);
    let pos = |i: usize, j: usize, k: usize| -> Vec3 {
        [
            bounds.min[0] + i as f32 * cell[0],
            bounds.min[1] + j as f32 * cell[1],
            bounds.min[2] + k as f32 * cell[2],
        ]
    };
    let index = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let values: Vec<f32> = (0..n * n * n)
        .into_par_iter()
        .map(|l| field.density(pos(l % n, (l / n) % n, l / (n * n))))
        .collect();
    if !values.iter().any(|&v| v >= level) {
        return Err(Error::EmptySurface(level));
    }
    let mut mesh = TriMesh::default();
    let mut welded: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let corner = |c: usize| {
                    let o = tables::CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut config = 0usize;
                let mut v = [0.0f32; 8];
                for (c, vc) in v.iter_mut().enumerate() {
                    let (a, b, d) = corner(c);
                    *vc = values[index(a, b, d)];
                    if *vc < level {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                let row = &tables::TRI_TABLE[config];
                let mut edge_vertex = [u32::MAX; 12];
                for tri in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in ids.iter_mut().zip(tri) {
                        let e = e as usize;
                        if edge_vertex[e] == u32::MAX {
                            let [c0, c1] = tables::EDGES[e];
                            let (p0, p1) = (corner(c0), corner(c1));
                            let (l0, l1) = (index(p0.0, p0.1, p0.2), index(p1.0, p1.1, p1.2));
                            let key = (l0.min(l1), l0.max(l1));
                            edge_vertex[e] = *welded.entry(key).or_insert_with(|| {
                                let (a, b) = (pos(p0.0, p0.1, p0.2), pos(p1.0, p1.1, p1.2));
                                mesh.vertices.push(edge_crossing(field, level, (a, v[c0]), (b, v[c1])));
                                (mesh.vertices.len() - 1) as u32
                            });
                        }
                        *slot = edge_vertex[e];
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    mesh.remove_degenerate();
    Ok(mesh)
}

const REFINE_STEPS: usize = 12;

/// Iso crossing on a lattice edge whose endpoints straddle `level`, found by
/// bisection on the field itself rather than by linear interpolation.
fn edge_crossing(field: &dyn DensityField, level: f32, (a, va): (Vec3, f32), (b, vb): (Vec3, f32)) -> Vec3 {
    let at = |t: f32| math::add(a, math::scale(math::sub(b, a), t));
    let below_at_a = va < level;
    if below_at_a == (vb < level) {
        return at(0.5);
    }
    let (mut lo, mut hi) = (0.0f32, 1.0f32);
    for _ in 0..REFINE_STEPS {
        let m = 0.5 * (lo + hi);
        if (field.density(at(m)) < level) == below_at_a {
            lo = m;
        } else {
            hi = m;
        }
    }
    at(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Ball {
        centre: Vec3,
        radius: f32,
    }

    impl DensityField for Ball {
        fn density(&self, p: Vec3) -> f32 {
            10.0 * (self.radius - math::norm(math::sub(p, self.centre)))
        }

        fn bounds(&self) -> Aabb {
            Aabb::cube(1.0)
        }
    }

    #[test]
    fn ball_is_closed_and_faces_outward() {
        let ball = Ball {
            centre: [0.1, 0.0, -0.05],
            radius: 0.5,
        };
        let m = extract_mesh(&ball, 24, 0.0).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.connected_components(), 1);
        for t in 0..m.triangles.len() {
            let [a, b, c] = m.corners(t);
            let normal = math::cross(math::sub(b, a), math::sub(c, a));
            assert!(math::dot(normal, math::sub(m.centroid(t), ball.centre)) > 0.0);
        }
    }

    #[test]
    fn vacuum_is_an_empty_surface() {
        let ball = Ball {
            centre: [0.0; 3],
            radius: -1.0,
        };
        assert!(matches!(extract_mesh(&ball, 8, 0.0), Err(Error::EmptySurface(_))));
    }
}
