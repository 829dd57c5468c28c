//! Pinhole cameras, ray generation and pose interpolation.
//!
//! Camera frame convention: +X right, +Y up, the camera looks down −Z.
//! Pixel `(u, v)` has `v` growing downwards and is sampled at its center.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::math::{Aabb, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    /// World-from-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Camera origin in world units.
    pub translation: Vector3<f64>,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f32,
    pub t_far: f32,
}

impl Ray {
    pub fn at(&self, t: f32) -> Vec3 {
        crate::math::at(self.origin, self.direction, t)
    }

    /// Restricts the march interval to the part inside `bounds`.
    pub fn clip(&self, bounds: &Aabb) -> Option<Ray> {
        let (t0, t1) = bounds.intersect(self.origin, self.direction)?;
        let t0 = t0.max(self.t_near);
        let t1 = t1.min(self.t_far);
        (t1 > t0).then_some(Ray {
            t_near: t0,
            t_far: t1,
            ..*self
        })
    }
}

/// Pose as stored in scene files and on the wire: unit quaternion
/// `(w, x, y, z)`, translation `(x, y, z)`, vertical field of view in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub fov_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

/// Angular distance under which two training poses count as neighbours for
/// augmentation.
pub const NEIGHBOR_ANGLE_DEG: f64 = 30.0;

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, fov_y: f64, width: u32, height: u32) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            fov_y,
            width,
            height,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if !(ortho <= 1e-6) || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(contract("camera rotation is not a proper rotation"));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(contract(format!("fovY {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(contract("camera image must be at least 1x1"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(contract("camera translation not finite"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// vertical. Falls back to another up vector when looking along `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| contract("look_at: eye equals target"))?;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-6 {
            right = forward.cross(&Vector3::new(0.0, 0.0, 1.0));
            if right.norm() < 1e-6 {
                right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
            }
        }
        let right = right.normalize();
        let cam_up = right.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, cam_up, -forward]);
        Self::new(rotation, eye, fov_y, width, height)
    }

    /// Same pose rendered at another image size.
    pub fn with_size(&self, width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ..self.clone()
        }
    }

    pub fn focal_px(&self) -> f64 {
        0.5 * f64::from(self.height) / (0.5 * self.fov_y).tan()
    }

    /// World-space viewing axis (camera −Z).
    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation.column(2).into_owned()
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// Ray through the center of pixel `(u, v)`, with an unbounded interval.
    pub fn ray(&self, u: u32, v: u32) -> Result<Ray> {
        if u >= self.width || v >= self.height {
            return Err(contract(format!(
                "pixel ({u}, {v}) outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(self.ray_at(f64::from(u) + 0.5, f64::from(v) + 0.5))
    }

    /// Ray through continuous image coordinates (pixel corners at integers).
    pub fn ray_at(&self, x: f64, y: f64) -> Ray {
        let f = self.focal_px();
        let d_cam = Vector3::new(
            (x - 0.5 * f64::from(self.width)) / f,
            -(y - 0.5 * f64::from(self.height)) / f,
            -1.0,
        );
        let d = (self.rotation * d_cam).normalize();
        let o = self.translation;
        Ray {
            origin: [o.x as f32, o.y as f32, o.z as f32],
            direction: [d.x as f32, d.y as f32, d.z as f32],
            t_near: 0.0,
            t_far: f32::INFINITY,
        }
    }

    /// Perspective projection of a world point to continuous image
    /// coordinates plus camera-space depth along the view axis. `None` when
    /// the point is not in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let pw = Vector3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        let pc = self.rotation.transpose() * (pw - self.translation);
        let depth = -pc.z;
        if depth <= 1e-9 {
            return None;
        }
        let f = self.focal_px();
        let x = pc.x / depth * f + 0.5 * f64::from(self.width);
        let y = -pc.y / depth * f + 0.5 * f64::from(self.height);
        Some((x, y, depth))
    }

    pub fn to_record(&self) -> PoseRecord {
        let q = self.quaternion();
        PoseRecord {
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            fov_y: self.fov_y,
            width: Some(self.width),
            height: Some(self.height),
        }
    }

    /// Reads a wire/scene pose; `default_size` fills a missing image size.
    pub fn from_record(rec: &PoseRecord, default_size: (u32, u32)) -> Result<Self> {
        let [w, x, y, z] = rec.quaternion;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && (n - 1.0).abs() < 1e-3) {
            return Err(contract(format!("quaternion norm {n} is not 1")));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Self::new(
            q.to_rotation_matrix().into_inner(),
            Vector3::from(rec.translation),
            rec.fov_y,
            rec.width.unwrap_or(default_size.0),
            rec.height.unwrap_or(default_size.1),
        )
    }
}

/// Rays for the given pixels.
pub fn generate_rays(pose: &CameraPose, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(u, v)| pose.ray(u, v)).collect()
}

/// Rays for every pixel, row-major.
pub fn all_rays(pose: &CameraPose) -> Vec<Ray> {
    let mut out = Vec::with_capacity((pose.width * pose.height) as usize);
    for v in 0..pose.height {
        for u in 0..pose.width {
            out.push(pose.ray_at(f64::from(u) + 0.5, f64::from(v) + 0.5));
        }
    }
    out
}

/// Angle in degrees between the viewing axes of two poses.
pub fn angular_distance_deg(a: &CameraPose, b: &CameraPose) -> f64 {
    a.forward().dot(&b.forward()).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Slerp of the rotations, lerp of the translations.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, t: f64) -> Result<CameraPose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if a.fov_y != b.fov_y || a.width != b.width || a.height != b.height {
        return Err(contract("interpolated poses must share intrinsics"));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let q = a.quaternion().slerp(&b.quaternion(), t);
    let rotation = q.to_rotation_matrix().into_inner();
    let translation = a.translation * (1.0 - t) + b.translation * t;
    CameraPose::new(rotation, translation, a.fov_y, a.width, a.height)
}

/// Picks a random training pose, a random neighbour within
/// [`NEIGHBOR_ANGLE_DEG`] (or the nearest other pose when none qualifies)
/// and returns a uniformly interpolated pose between them.
pub fn sample_augmented_pose(train: &[CameraPose], rng: &mut impl Rng) -> Result<CameraPose> {
    if train.len() < 2 {
        return Err(contract("augmentation needs at least two training poses"));
    }
    let a = rng.gen_range(0..train.len());
    let neighbours: Vec<usize> = (0..train.len())
        .filter(|&j| j != a && angular_distance_deg(&train[a], &train[j]) < NEIGHBOR_ANGLE_DEG)
        .collect();
    let b = if neighbours.is_empty() {
        let nearest = (0..train.len())
            .filter(|&j| j != a)
            .min_by(|&i, &j| {
                angular_distance_deg(&train[a], &train[i]).total_cmp(&angular_distance_deg(&train[a], &train[j]))
            })
            .expect("at least two poses");
        log::debug!("no neighbour of pose {a} under {NEIGHBOR_ANGLE_DEG} deg; using nearest {nearest}");
        nearest
    } else {
        neighbours[rng.gen_range(0..neighbours.len())]
    };
    let t: f64 = rng.gen_range(0.0..1.0);
    interpolate_pose(&train[a], &train[b], t)
}

/// Standard capture rig: 24 training poses on two rings (12 at 10° and 12 at
/// 35° elevation, offset by 15° in azimuth) and 6 test poses at 22.5°,
/// all looking at `target` from `radius`.
pub fn standard_rig(
    target: Vector3<f64>,
    radius: f64,
    fov_y: f64,
    width: u32,
    height: u32,
) -> Result<(Vec<CameraPose>, Vec<CameraPose>)> {
    let orbit = |az_deg: f64, el_deg: f64| -> Result<CameraPose> {
        let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
        let eye = target + Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin()) * radius;
        CameraPose::look_at(eye, target, Vector3::y(), fov_y, width, height)
    };
    let mut train = Vec::with_capacity(24);
    for k in 0..12 {
        train.push(orbit(30.0 * k as f64, 10.0)?);
    }
    for k in 0..12 {
        train.push(orbit(30.0 * k as f64 + 15.0, 35.0)?);
    }
    let test = (0..6)
        .map(|k| orbit(60.0 * k as f64 + 7.5, 22.5))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}
