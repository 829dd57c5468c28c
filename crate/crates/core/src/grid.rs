//! Dense trilinear feature grids.
//!
//! Vertices sit on a regular lattice spanning the grid bounds, with vertex
//! `(i, j, k)` at `min + (i, j, k) * cell`. Queries outside the bounds are
//! clamped onto the boundary.

use rand::Rng;

use crate::error::{contract, Result};
use crate::math::{Aabb, Vec3};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    resolution: [usize; 3],
    channels: usize,
    bounds: Aabb,
    values: Tensor,
}

/// Per-point lattice corners and interpolation weights, shared between
/// grids of the same layout.
#[derive(Clone, Debug, Default)]
pub struct TrilinearCoeffs {
    pub corners: Vec<[u32; 8]>,
    pub weights: Vec<[f32; 8]>,
}

impl TrilinearCoeffs {
    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }
}

impl FeatureGrid {
    pub fn zeros(resolution: [usize; 3], channels: usize, bounds: Aabb) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) || channels == 0 {
            return Err(contract(format!(
                "grid needs >= 2 vertices per axis and >= 1 channel, got {resolution:?} x {channels}"
            )));
        }
        if (0..3).any(|i| bounds.max[i] <= bounds.min[i]) {
            return Err(contract("grid bounds must have positive extent"));
        }
        Ok(Self {
            resolution,
            channels,
            bounds,
            values: Tensor::zeros(&[resolution[0], resolution[1], resolution[2], channels]),
        })
    }

    /// Grid filled with `U(-scale, scale)` values.
    pub fn uniform(
        resolution: [usize; 3],
        channels: usize,
        bounds: Aabb,
        scale: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut g = Self::zeros(resolution, channels, bounds)?;
        if scale > 0.0 {
            for v in g.values.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        Ok(g)
    }

    pub fn from_values(resolution: [usize; 3], bounds: Aabb, values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 4 || shape[..3] != resolution {
            return Err(contract(format!(
                "grid values shape {shape:?} does not match resolution {resolution:?}"
            )));
        }
        let channels = shape[3];
        let mut g = Self::zeros(resolution, channels, bounds)?;
        g.values = values;
        Ok(g)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bounds.extent();
        [
            e[0] / (self.resolution[0] - 1) as f32,
            e[1] / (self.resolution[1] - 1) as f32,
            e[2] / (self.resolution[2] - 1) as f32,
        ]
    }

    #[inline]
    pub fn vertex_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution[1] + j) * self.resolution[2] + k
    }

    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = self.cell_size();
        [
            self.bounds.min[0] + i as f32 * c[0],
            self.bounds.min[1] + j as f32 * c[1],
            self.bounds.min[2] + k as f32 * c[2],
        ]
    }

    pub fn vertex(&self, i: usize, j: usize, k: usize) -> &[f32] {
        let v = self.vertex_index(i, j, k) * self.channels;
        &self.values.data()[v..v + self.channels]
    }

    pub fn vertex_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f32] {
        let v = self.vertex_index(i, j, k) * self.channels;
        let c = self.channels;
        &mut self.values.data_mut()[v..v + c]
    }

    /// Lattice corners and weights for one point.
    #[inline]
    pub fn corner_weights(&self, p: Vec3) -> ([u32; 8], [f32; 8]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0f32; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let lo = self.bounds.min[a];
            let ext = self.bounds.max[a] - lo;
            let mut g = ((p[a] - lo) / ext * (n - 1) as f32).clamp(0.0, (n - 1) as f32);
            // Snap lattice-aligned queries so a vertex returns its value exactly.
            let r = g.round();
            if (g - r).abs() < VERTEX_SNAP {
                g = r;
            }
            let i0 = (g.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = g - i0 as f32;
        }
        let (ny, nz) = (self.resolution[1], self.resolution[2]);
        let idx = |i: usize, j: usize, k: usize| ((i * ny + j) * nz + k) as u32;
        let [x, y, z] = base;
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        (
            [
                idx(x, y, z),
                idx(x, y, z + 1),
                idx(x, y + 1, z),
                idx(x, y + 1, z + 1),
                idx(x + 1, y, z),
                idx(x + 1, y, z + 1),
                idx(x + 1, y + 1, z),
                idx(x + 1, y + 1, z + 1),
            ],
            [
                gx * gy * gz,
                gx * gy * fz,
                gx * fy * gz,
                gx * fy * fz,
                fx * gy * gz,
                fx * gy * fz,
                fx * fy * gz,
                fx * fy * fz,
            ],
        )
    }

    pub fn coefficients(&self, points: &[Vec3]) -> TrilinearCoeffs {
        let mut out = TrilinearCoeffs {
            corners: Vec::with_capacity(points.len()),
            weights: Vec::with_capacity(points.len()),
        };
        for &p in points {
            let (c, w) = self.corner_weights(p);
            out.corners.push(c);
            out.weights.push(w);
        }
        out
    }

    /// Interpolated feature at `p`, written into `out` (length = channels).
    #[inline]
    pub fn query_into(&self, p: Vec3, out: &mut [f32]) {
        let (corners, weights) = self.corner_weights(p);
        gather_one(self.values.data(), self.channels, &corners, &weights, out);
    }

    pub fn query(&self, p: Vec3) -> Vec<f32> {
        let mut out = vec![0.0; self.channels];
        self.query_into(p, &mut out);
        out
    }

    /// Interpolated features for many points, `[P, channels]`.
    pub fn gather(&self, coeffs: &TrilinearCoeffs) -> Tensor {
        let c = self.channels;
        let mut data = vec![0.0f32; coeffs.len() * c];
        for (i, out) in data.chunks_exact_mut(c).enumerate() {
            gather_one(self.values.data(), c, &coeffs.corners[i], &coeffs.weights[i], out);
        }
        Tensor::new(vec![coeffs.len(), c], data).expect("gather shape")
    }

    /// Same lattice and bounds (so trilinear coefficients can be shared).
    pub fn same_layout(&self, other: &FeatureGrid) -> bool {
        self.resolution == other.resolution && self.bounds == other.bounds
    }
}

const VERTEX_SNAP: f32 = 1e-4;

#[inline]
pub(crate) fn gather_one(values: &[f32], channels: usize, corners: &[u32; 8], weights: &[f32; 8], out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&ci, &w) in corners.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let base = ci as usize * channels;
        for (o, &v) in out.iter_mut().zip(&values[base..base + channels]) {
            *o += w * v;
        }
    }
}
