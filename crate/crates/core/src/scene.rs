//! Analytic primitive scenes and the ground-truth renderer.
//!
//! Each object is an exact signed distance function. Density is
//! `density_scale * occupancy(sdf)` where occupancy ramps smoothly from 1 to
//! 0 across a shell of width `shell_width` centred on the surface.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraPose, PoseRecord, Ray};
use crate::error::{contract, Result};
use crate::math::{self, Aabb, Vec3};

pub const SCENE_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f32,
    },
    #[serde(rename_all = "camelCase")]
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Torus around the world Y axis through `center`.
    #[serde(rename_all = "camelCase")]
    Torus {
        center: Vec3,
        major_radius: f32,
        minor_radius: f32,
    },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f32 {
        match *self {
            Primitive::Sphere { center, radius } => math::norm(math::sub(p, center)) - radius,
            Primitive::Box { center, half_extents } => {
                let d = math::sub(p, center);
                let q = [
                    d[0].abs() - half_extents[0],
                    d[1].abs() - half_extents[1],
                    d[2].abs() - half_extents[2],
                ];
                let outside = math::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let d = math::sub(p, center);
                let ring = (d[0] * d[0] + d[2] * d[2]).sqrt() - major_radius;
                (ring * ring + d[1] * d[1]).sqrt() - minor_radius
            }
        }
    }

    pub fn aabb(&self) -> Aabb {
        match *self {
            Primitive::Sphere { center, radius } => {
                Aabb::new(math::sub(center, [radius; 3]), math::add(center, [radius; 3]))
            }
            Primitive::Box { center, half_extents } => {
                Aabb::new(math::sub(center, half_extents), math::add(center, half_extents))
            }
            Primitive::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let h = [major_radius + minor_radius, minor_radius, major_radius + minor_radius];
                Aabb::new(math::sub(center, h), math::add(center, h))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// 1-based; 0 is the background.
    pub id: u32,
    pub name: String,
    pub primitive: Primitive,
    pub albedo: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneSpec {
    pub bounds: Aabb,
    pub density_scale: f32,
    #[serde(default = "default_shell")]
    pub shell_width: f32,
    pub background: [f32; 3],
    pub objects: Vec<SceneObject>,
}

fn default_shell() -> f32 {
    0.04
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cameras {
    pub train: Vec<PoseRecord>,
    pub test: Vec<PoseRecord>,
}

/// On-disk scene document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneFile {
    pub version: u32,
    #[serde(flatten)]
    pub scene: SceneSpec,
    pub cameras: Cameras,
}

/// A scene together with its capture rig.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SceneSpec,
    pub train: Vec<CameraPose>,
    pub test: Vec<CameraPose>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }

    pub fn from_file(file: &SceneFile) -> Result<Self> {
        if file.version != SCENE_FILE_VERSION {
            return Err(contract(format!(
                "scene file version {} (expected {SCENE_FILE_VERSION})",
                file.version
            )));
        }
        file.scene.validate()?;
        let read = |recs: &[PoseRecord]| -> Result<Vec<CameraPose>> {
            recs.iter().map(|r| CameraPose::from_record(r, (64, 64))).collect()
        };
        Ok(Self {
            scene: file.scene.clone(),
            train: read(&file.cameras.train)?,
            test: read(&file.cameras.test)?,
        })
    }

    pub fn to_file(&self) -> SceneFile {
        SceneFile {
            version: SCENE_FILE_VERSION,
            scene: self.scene.clone(),
            cameras: Cameras {
                train: self.train.iter().map(CameraPose::to_record).collect(),
                test: self.test.iter().map(CameraPose::to_record).collect(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    /// Standard scene with the standard rig at the given image size.
    pub fn standard(scene: SceneSpec, width: u32, height: u32) -> Result<Self> {
        let (train, test) = camera::standard_rig(
            Vector3::zeros(),
            STANDARD_RIG_RADIUS,
            STANDARD_FOV_Y_DEG.to_radians(),
            width,
            height,
        )?;
        Ok(Self { scene, train, test })
    }
}

pub const STANDARD_RIG_RADIUS: f64 = 2.8;
pub const STANDARD_FOV_Y_DEG: f64 = 40.0;

/// Ground truth for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleFrame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f32; 3]>,
    pub object_id: Vec<u32>,
    /// First-surface ray parameter, `+inf` on a miss.
    pub depth: Vec<f32>,
}

impl OracleFrame {
    pub fn mask_of(&self, id: u32) -> Vec<bool> {
        self.object_id.iter().map(|&o| o == id).collect()
    }
}

impl SceneSpec {
    pub fn vacuum() -> Self {
        Self {
            bounds: Aabb::cube(1.0),
            density_scale: 150.0,
            shell_width: 0.04,
            background: [0.0; 3],
            objects: Vec::new(),
        }
    }

    /// One sphere at the origin.
    pub fn one_sphere() -> Self {
        Self {
            objects: vec![SceneObject {
                id: 1,
                name: "sphere".into(),
                primitive: Primitive::Sphere {
                    center: [0.0; 3],
                    radius: 0.45,
                },
                albedo: [0.85, 0.3, 0.2],
            }],
            ..Self::vacuum()
        }
    }

    /// The standard two-object scene: a red sphere and a blue box.
    pub fn two_object() -> Self {
        Self {
            objects: vec![
                SceneObject {
                    id: 1,
                    name: "sphere".into(),
                    primitive: Primitive::Sphere {
                        center: [-0.4, 0.0, 0.0],
                        radius: 0.35,
                    },
                    albedo: [0.9, 0.25, 0.2],
                },
                SceneObject {
                    id: 2,
                    name: "box".into(),
                    primitive: Primitive::Box {
                        center: [0.42, -0.05, 0.05],
                        half_extents: [0.22, 0.3, 0.22],
                    },
                    albedo: [0.2, 0.35, 0.9],
                },
            ],
            ..Self::vacuum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density_scale > 0.0) || !(self.shell_width > 0.0) {
            return Err(contract("density scale and shell width must be positive"));
        }
        if (0..3).any(|i| self.bounds.max[i] <= self.bounds.min[i]) {
            return Err(contract("scene bounds must have positive extent"));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.first() == Some(&0) {
            return Err(contract("object id 0 is reserved for the background"));
        }
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract("object ids must be unique"));
        }
        for o in &self.objects {
            let b = o.primitive.aabb();
            if !self.bounds.contains(b.min) || !self.bounds.contains(b.max) {
                return Err(contract(format!("object {} leaves the scene bounds", o.id)));
            }
            if o.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(contract(format!("object {} albedo outside [0, 1]", o.id)));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Smallest signed distance over all objects, with the owning id.
    pub fn nearest(&self, p: Vec3) -> (f32, u32) {
        self.objects
            .iter()
            .map(|o| (o.primitive.sdf(p), o.id))
            .fold((f32::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    pub fn occupancy(&self, sdf: f32) -> f32 {
        let s = ((0.5 * self.shell_width - sdf) / self.shell_width).clamp(0.0, 1.0);
        s * s * (3.0 - 2.0 * s)
    }

    pub fn density(&self, p: Vec3) -> f32 {
        self.objects
            .iter()
            .map(|o| self.occupancy(o.primitive.sdf(p)))
            .sum::<f32>()
            * self.density_scale
    }

    /// Density and occupancy-weighted albedo at `p`.
    fn density_color(&self, p: Vec3) -> (f32, [f32; 3]) {
        let mut occ_sum = 0.0f32;
        let mut col = [0.0f32; 3];
        for o in &self.objects {
            let occ = self.occupancy(o.primitive.sdf(p));
            if occ > 0.0 {
                occ_sum += occ;
                for k in 0..3 {
                    col[k] += occ * o.albedo[k];
                }
            }
        }
        if occ_sum > 0.0 {
            col = col.map(|c| c / occ_sum);
        }
        (occ_sum * self.density_scale, col)
    }
}

/// Marching step of the oracle relative to the shell width.
const ORACLE_STEPS_PER_SHELL: f32 = 12.0;

fn march_color(scene: &SceneSpec, ray: &Ray, step: f32) -> [f32; 3] {
    let Some(r) = ray.clip(&scene.bounds) else {
        return scene.background;
    };
    let half = 0.5 * scene.shell_width;
    let mut t = r.t_near;
    let mut trans = 1.0f32;
    let mut col = [0.0f32; 3];
    while t < r.t_far && trans > 1e-6 {
        let (d, _) = scene.nearest(r.at(t));
        if d > half {
            // Outside every shell the density is exactly zero.
            t += (d - half).max(0.25 * step);
            continue;
        }
        let h = step.min(r.t_far - t);
        let (sigma, c) = scene.density_color(r.at(t + 0.5 * h));
        let alpha = 1.0 - (-sigma * h).exp();
        for k in 0..3 {
            col[k] += trans * alpha * c[k];
        }
        trans *= 1.0 - alpha;
        t += h;
    }
    for k in 0..3 {
        col[k] += trans * scene.background[k];
    }
    col
}

/// First zero crossing of the signed distance along the ray.
pub fn first_surface(scene: &SceneSpec, ray: &Ray) -> Option<(f32, u32)> {
    let r = ray.clip(&scene.bounds)?;
    let mut t = r.t_near;
    for _ in 0..1024 {
        let (d, id) = scene.nearest(r.at(t));
        if d < 1e-5 {
            return Some((t, id));
        }
        t += d;
        if t > r.t_far {
            return None;
        }
    }
    None
}

fn render_with_step(scene: &SceneSpec, pose: &CameraPose, step: f32) -> OracleFrame {
    let rays = camera::all_rays(pose);
    let mut rgb = Vec::with_capacity(rays.len());
    let mut object_id = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    for ray in &rays {
        rgb.push(march_color(scene, ray, step));
        match first_surface(scene, ray) {
            Some((t, id)) => {
                object_id.push(id);
                depth.push(t);
            }
            None => {
                object_id.push(0);
                depth.push(f32::INFINITY);
            }
        }
    }
    OracleFrame {
        width: pose.width,
        height: pose.height,
        rgb,
        object_id,
        depth,
    }
}

/// Deterministic ground-truth render: dense ray marching of the analytic
/// density for colour, sphere tracing of the SDF for depth and object ids.
pub fn oracle_render(scene: &SceneSpec, pose: &CameraPose) -> OracleFrame {
    render_with_step(scene, pose, scene.shell_width / ORACLE_STEPS_PER_SHELL)
}

#[doc(hidden)]
pub fn oracle_render_with_step(scene: &SceneSpec, pose: &CameraPose, step: f32) -> OracleFrame {
    render_with_step(scene, pose, step)
}
