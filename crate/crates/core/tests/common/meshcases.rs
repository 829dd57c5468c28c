//! Mesh oracles shared by the mesh tests and the acceptance run.

use sanerf_core::camera::CameraPose;
use sanerf_core::math;
use sanerf_core::mesh::{
    extract_mesh, project_mask, read_obj, read_ply, write_obj, write_ply, Bvh, SelectionState, TriMesh, SIGMA_THRESHOLD,
};
use sanerf_core::scene::{Dataset, SceneSpec};

pub const RES: usize = 128;

pub fn cell(scene: &SceneSpec) -> f32 {
    scene.bounds.extent()[0] / (RES - 1) as f32
}

pub fn two_object() -> (SceneSpec, TriMesh, Bvh) {
    let scene = SceneSpec::two_object();
    let mut mesh = extract_mesh(&scene, RES, SIGMA_THRESHOLD).unwrap();
    mesh.label_objects(&scene);
    let bvh = Bvh::new(&mesh);
    (scene, mesh, bvh)
}

/// Signed distance at which the analytic density crosses `level`.
pub fn iso_offset(scene: &SceneSpec, level: f32) -> f32 {
    let (mut lo, mut hi) = (-0.5 * scene.shell_width, 0.5 * scene.shell_width);
    for _ in 0..60 {
        let m = 0.5 * (lo + hi);
        if scene.density_scale * scene.occupancy(m) > level {
            lo = m
        } else {
            hi = m
        }
    }
    0.5 * (lo + hi)
}

/// Silhouette of object `id` on the extraction iso-surface seen from `pose`,
/// by sphere tracing the analytic distances shifted to the iso offset. The
/// target is pulled in by a quarter cell so that rays grazing its tessellated
/// rim are left out of the mask; occluders keep their full extent.
pub fn iso_mask(scene: &SceneSpec, pose: &CameraPose, id: u32) -> Vec<bool> {
    let d = iso_offset(scene, SIGMA_THRESHOLD);
    let shifted = |p| {
        scene
            .objects
            .iter()
            .map(|o| {
                (
                    o.primitive.sdf(p) - d + if o.id == id { 0.25 * cell(scene) } else { 0.0 },
                    o.id,
                )
            })
            .fold((f32::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    };
    sanerf_core::camera::all_rays(pose)
        .iter()
        .map(|ray| {
            let Some(r) = ray.clip(&scene.bounds) else { return false };
            let mut t = r.t_near;
            while t < r.t_far {
                let (dist, hit) = shifted(r.at(t));
                if dist < 1e-5 {
                    return hit == id;
                }
                t += dist;
            }
            false
        })
        .collect()
}

/// The standard poses plus their mirror images below the equator.
pub fn around(ds: &Dataset, size: u32) -> Vec<CameraPose> {
    let mut out = Vec::new();
    for p in ds.train.iter().chain(&ds.test) {
        let t = p.translation;
        out.push(view(p, size));
        out.push(
            CameraPose::look_at(
                nalgebra::Vector3::new(t.x, -t.y, t.z),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::y(),
                p.fov_y,
                size,
                size,
            )
            .unwrap(),
        );
    }
    out
}

pub fn view(pose: &CameraPose, size: u32) -> CameraPose {
    pose.with_size(size, size)
}

pub fn sphere_vertices_lie_on_the_analytic_radius() {
    let scene = SceneSpec::one_sphere();
    let mesh = extract_mesh(&scene, RES, SIGMA_THRESHOLD).unwrap();
    assert!(mesh.vertices.len() > 500);
    let tol = 1.5 * cell(&scene);
    for v in &mesh.vertices {
        assert!((math::norm(*v) - 0.45).abs() < tol, "vertex {v:?}");
    }
    assert!(mesh.is_watertight());
}

pub fn full_silhouette_selects_the_object_only() {
    let (scene, mesh, bvh) = two_object();
    let ds = Dataset::standard(scene.clone(), 8, 8).unwrap();
    let ids = mesh.object_ids.as_ref().unwrap();
    for pose in ds.test.iter().map(|p| view(p, 128)) {
        for target in [1u32, 2] {
            let mask = iso_mask(&scene, &pose, target);
            let mut sel = SelectionState::for_mesh(&mesh);
            project_mask(&bvh, &mut sel, &pose, &mask).unwrap();
            let visible: Vec<usize> = (0..mesh.triangles.len())
                .filter(|&t| ids[t] == target && sel.votes[t] != [0, 0])
                .collect();
            let chosen = visible.iter().filter(|&&t| sel.is_selected(t)).count();
            let foreign = (0..mesh.triangles.len())
                .filter(|&t| ids[t] != target && sel.is_selected(t))
                .count();
            assert!(!visible.is_empty());
            assert!(
                chosen as f64 >= 0.9 * visible.len() as f64,
                "object {target}: {chosen} of {} visible",
                visible.len()
            );
            assert_eq!(foreign, 0, "object {target}");
            let before = sel.selected();
            project_mask(&bvh, &mut sel, &pose, &mask).unwrap();
            assert_eq!(sel.selected(), before);
        }
    }
}

pub fn meshes_round_trip_through_obj_and_ply() {
    let (_, mut mesh, _) = two_object();
    mesh.object_ids = None;
    let mut obj = Vec::new();
    write_obj(&mesh, &mut obj).unwrap();
    let mut ply = Vec::new();
    write_ply(&mesh, &mut ply).unwrap();
    for back in [read_obj(&obj[..]).unwrap(), read_ply(&ply[..]).unwrap()] {
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!((0..3).all(|i| (a[i] - b[i]).abs() <= 1e-5));
        }
    }
}
