use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraPose, Ray};
use crate::error::{contract, Error, Result};
use crate::math::{self, Vec3};

use super::{Bvh, TriMesh};

/// Per-triangle votes from projected masks. A triangle is selected when it
/// has at least one vote and its positive share exceeds the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub threshold: f64,
    /// `[positive, negative]` per triangle.
    pub votes: Vec<[u32; 2]>,
}

impl SelectionState {
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    pub fn new(triangles: usize, threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(contract(format!("selection threshold {threshold} outside [0, 1)")));
        }
        Ok(Self {
            threshold,
            votes: vec![[0, 0]; triangles],
        })
    }

    pub fn for_mesh(mesh: &TriMesh) -> Self {
        Self::new(mesh.triangles.len(), Self::DEFAULT_THRESHOLD).expect("default threshold is valid")
    }

    pub fn is_selected(&self, t: usize) -> bool {
        let [p, n] = self.votes[t];
        p + n > 0 && f64::from(p) / f64::from(p + n) > self.threshold
    }

    pub fn selected(&self) -> Vec<bool> {
        (0..self.votes.len()).map(|t| self.is_selected(t)).collect()
    }

    pub fn selected_count(&self) -> usize {
        (0..self.votes.len()).filter(|&t| self.is_selected(t)).count()
    }

    pub fn reset(&mut self) {
        self.votes.iter_mut().for_each(|v| *v = [0, 0]);
    }
}

/// Casts one ray per pixel of `pose` and votes for the first triangle hit:
/// positive under a masked pixel, negative otherwise.
pub fn project_mask(bvh: &Bvh, selection: &mut SelectionState, pose: &CameraPose, mask: &[bool]) -> Result<()> {
    if mask.len() != (pose.width * pose.height) as usize {
        return Err(contract(format!(
            "mask of {} pixels for a {}x{} view",
            mask.len(),
            pose.width,
            pose.height
        )));
    }
    if selection.votes.len() != bvh.triangle_count() {
        return Err(contract("selection and mesh disagree on the triangle count"));
    }
    for (ray, &m) in camera::all_rays(pose).iter().zip(mask) {
        if let Some(hit) = bvh.raycast(ray) {
            selection.votes[hit.triangle as usize][usize::from(!m)] += 1;
        }
    }
    Ok(())
}

/// A click pinned to the surface point under it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedClick {
    pub world_point: Vec3,
    pub source_pose: CameraPose,
}

impl TrackedClick {
    /// Casts the click's pixel ray; `None` when it misses the mesh.
    pub fn new(bvh: &Bvh, pose: &CameraPose, u: u32, v: u32) -> Result<Option<Self>> {
        Ok(bvh.raycast(&pose.ray(u, v)?).map(|h| Self {
            world_point: h.point,
            source_pose: pose.clone(),
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "status")]
pub enum ClickView {
    /// Continuous image coordinates of the tracked point.
    Visible {
        x: f64,
        y: f64,
    },
    Occluded {
        x: f64,
        y: f64,
    },
    OffScreen,
}

const OCCLUSION_TOLERANCE: f32 = 1e-3;

/// Where a tracked click appears from `pose`.
pub fn track_click(bvh: &Bvh, click: &TrackedClick, pose: &CameraPose) -> ClickView {
    let Some((x, y, _)) = pose.project(click.world_point) else {
        return ClickView::OffScreen;
    };
    if x < 0.0 || y < 0.0 || x >= f64::from(pose.width) || y >= f64::from(pose.height) {
        return ClickView::OffScreen;
    }
    let o = pose.translation;
    let origin = [o.x as f32, o.y as f32, o.z as f32];
    let to_point = math::sub(click.world_point, origin);
    let dist = math::norm(to_point);
    let ray = Ray {
        origin,
        direction: math::normalize(to_point),
        t_near: 0.0,
        t_far: dist - OCCLUSION_TOLERANCE,
    };
    if bvh.raycast(&ray).is_some() {
        ClickView::Occluded { x, y }
    } else {
        ClickView::Visible { x, y }
    }
}

/// Selected triangles as a standalone mesh with compacted vertex indices.
pub fn extract_selected(mesh: &TriMesh, selection: &SelectionState) -> Result<TriMesh> {
    if selection.votes.len() != mesh.triangles.len() {
        return Err(contract("selection and mesh disagree on the triangle count"));
    }
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut out = TriMesh::default();
    let mut ids = Vec::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if !selection.is_selected(t) {
            continue;
        }
        let mapped = tri.map(|i| {
            *remap.entry(i).or_insert_with(|| {
                out.vertices.push(mesh.vertices[i as usize]);
                (out.vertices.len() - 1) as u32
            })
        });
        out.triangles.push(mapped);
        if let Some(src) = &mesh.object_ids {
            ids.push(src[t]);
        }
    }
    if out.triangles.is_empty() {
        return Err(Error::EmptySelection);
    }
    if mesh.object_ids.is_some() {
        out.object_ids = Some(ids);
    }
    Ok(out)
}
