//! Pluggable semantic feature grid rendered on top of a frozen radiance
//! field, with per-scale decode heads and the imitation losses.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::camera::{self, CameraPose, Ray};
use crate::error::{contract, Result};
use crate::grid::FeatureGrid;
use crate::math::{Aabb, Vec3};
use crate::mlp::{Mlp, MlpScratch, MlpVars};
use crate::radiance::{RadianceField, RaySamples};
use crate::tensor::{cosine, Tensor};

/// Size of one teacher feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub height: u32,
    pub width: u32,
    pub channels: usize,
}

impl FeatureDims {
    pub fn pixels(&self) -> usize {
        (self.height * self.width) as usize
    }
}

/// A `[height, width, channels]` feature map at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub scale: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(scale: usize, values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 || values.is_empty() {
            return Err(contract(format!("feature map shape {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(contract("feature map has non-finite values"));
        }
        Ok(Self { scale, values })
    }

    pub fn from_rows(scale: usize, height: u32, width: u32, rows: Vec<f32>) -> Result<Self> {
        let c = rows.len() / (height * width).max(1) as usize;
        Self::new(scale, Tensor::new(vec![height as usize, width as usize, c], rows)?)
    }

    pub fn height(&self) -> u32 {
        self.values.shape()[0] as u32
    }

    pub fn width(&self) -> u32 {
        self.values.shape()[1] as u32
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            height: self.height(),
            width: self.width(),
            channels: self.channels(),
        }
    }

    pub fn pixels(&self) -> usize {
        (self.height() * self.width()) as usize
    }

    pub fn pixel(&self, u: u32, v: u32) -> &[f32] {
        let c = self.channels();
        let i = (v * self.width() + u) as usize * c;
        &self.values.data()[i..i + c]
    }

    /// Pixel `p` in row-major order.
    pub fn row(&self, p: usize) -> &[f32] {
        let c = self.channels();
        &self.values.data()[p * c..(p + 1) * c]
    }

    /// `[pixels, channels]` view of the values.
    pub fn rows_tensor(&self) -> Tensor {
        self.values
            .clone()
            .reshape(&[self.pixels(), self.channels()])
            .expect("feature rows")
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamped to the edge pixels.
    pub fn bilinear(&self, x: f32, y: f32, out: &mut [f32]) {
        let (w, h) = (self.width() as f32, self.height() as f32);
        let fx = (x - 0.5).clamp(0.0, w - 1.0);
        let fy = (y - 0.5).clamp(0.0, h - 1.0);
        let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
        let x1 = (x0 + 1).min(self.width() - 1);
        let y1 = (y0 + 1).min(self.height() - 1);
        let (ax, ay) = (fx - x0 as f32, fy - y0 as f32);
        let (p00, p10) = (self.pixel(x0, y0), self.pixel(x1, y0));
        let (p01, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
        for (k, o) in out.iter_mut().enumerate() {
            let top = p00[k] + ax * (p10[k] - p00[k]);
            let bot = p01[k] + ax * (p11[k] - p01[k]);
            *o = top + ay * (bot - top);
        }
    }

    /// Mean over pixels of the squared distance to the mean feature.
    pub fn variance(&self) -> f32 {
        let c = self.channels();
        let n = self.pixels() as f32;
        let mut mean = vec![0.0f32; c];
        for p in 0..self.pixels() {
            for (m, v) in mean.iter_mut().zip(self.row(p)) {
                *m += v / n;
            }
        }
        (0..self.pixels())
            .map(|p| {
                self.row(p)
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f32>()
            })
            .sum::<f32>()
            / n
    }
}

/// Anything that returns the first surface point hit by a ray.
pub trait SurfaceCaster {
    fn surface_point(&self, ray: &Ray) -> Option<Vec3>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticField {
    pub grid: FeatureGrid,
    pub heads: Vec<Mlp>,
    pub feature_dims: Vec<FeatureDims>,
}

const SEM_GRID_INIT: f32 = 0.1;

impl SemanticField {
    pub fn new(
        bounds: Aabb,
        resolution: usize,
        channels: usize,
        hidden: usize,
        feature_dims: &[FeatureDims],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = FeatureGrid::uniform([resolution; 3], channels, bounds, SEM_GRID_INIT, rng)?;
        let heads = feature_dims
            .iter()
            .map(|d| Mlp::new(&[channels, hidden, d.channels], rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(grid, heads, feature_dims.to_vec())
    }

    pub fn from_parts(grid: FeatureGrid, heads: Vec<Mlp>, feature_dims: Vec<FeatureDims>) -> Result<Self> {
        if heads.is_empty() || heads.len() != feature_dims.len() {
            return Err(contract(format!(
                "{} heads for {} feature scales",
                heads.len(),
                feature_dims.len()
            )));
        }
        for (i, (h, d)) in heads.iter().zip(&feature_dims).enumerate() {
            if h.input_dim() != grid.channels() || h.output_dim() != d.channels {
                return Err(contract(format!(
                    "head {i} maps {} -> {}, expected {} -> {}",
                    h.input_dim(),
                    h.output_dim(),
                    grid.channels(),
                    d.channels
                )));
            }
        }
        Ok(Self {
            grid,
            heads,
            feature_dims,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.heads.len()
    }

    fn head(&self, scale: usize) -> Result<&Mlp> {
        self.heads
            .get(scale)
            .ok_or_else(|| contract(format!("scale {scale} of {}", self.heads.len())))
    }

    /// `sum_k w_k E_sem(x_k)`, before any head.
    pub fn accumulate(&self, samples: &RaySamples) -> Vec<f32> {
        let g = self.grid.channels();
        let mut acc = vec![0.0f32; g];
        let mut f = vec![0.0f32; g];
        for (&p, &w) in samples.positions.iter().zip(&samples.weights) {
            if w == 0.0 {
                continue;
            }
            self.grid.query_into(p, &mut f);
            for (a, v) in acc.iter_mut().zip(&f) {
                *a += w * v;
            }
        }
        acc
    }

    /// Deferred-MLP feature: the head is applied once to the weighted sum of
    /// grid features, never per sample.
    pub fn render_feature_volumetric(&self, scale: usize, samples: &RaySamples) -> Result<Vec<f32>> {
        if samples.is_empty() || samples.weights.len() != samples.positions.len() {
            return Err(contract("volumetric feature rendering needs the ray's samples"));
        }
        let head = self.head(scale)?;
        let acc = self.accumulate(samples);
        Ok(apply_head(head, &acc))
    }

    /// Feature of a single surface point: `head(E_sem(x_s))`.
    pub fn render_feature_surface(&self, scale: usize, x: Vec3) -> Result<Vec<f32>> {
        let head = self.head(scale)?;
        Ok(apply_head(head, &self.grid.query(x)))
    }

    /// Feature of empty space: the head applied to a zero accumulation.
    pub fn background_feature(&self, scale: usize) -> Result<Vec<f32>> {
        let head = self.head(scale)?;
        Ok(apply_head(head, &vec![0.0; self.grid.channels()]))
    }

    /// One ray per feature pixel at this scale's resolution. Uses the
    /// surface shortcut when `surface` is given, otherwise volumetric
    /// rendering with the frozen base field's quadrature weights.
    pub fn render_feature_map(
        &self,
        base: &RadianceField,
        pose: &CameraPose,
        scale: usize,
        surface: Option<&dyn SurfaceCaster>,
    ) -> Result<FeatureMap> {
        let dims = *self
            .feature_dims
            .get(scale)
            .ok_or_else(|| contract(format!("scale {scale} of {}", self.feature_dims.len())))?;
        let head = self.head(scale)?;
        let rays = camera::all_rays(&pose.with_size(dims.width, dims.height));
        let g = self.grid.channels();
        let mut rows = Vec::with_capacity(rays.len() * dims.channels);
        let mut scratch = MlpScratch::default();
        let mut out = vec![0.0f32; dims.channels];
        let mut acc = vec![0.0f32; g];
        for ray in &rays {
            match surface {
                Some(s) => match s.surface_point(ray) {
                    Some(x) => self.grid.query_into(x, &mut acc),
                    None => acc.iter_mut().for_each(|v| *v = 0.0),
                },
                None => acc = self.accumulate(&base.trace(ray)?.samples),
            }
            head.forward_row(&acc, &mut scratch, &mut out);
            rows.extend_from_slice(&out);
        }
        FeatureMap::from_rows(scale, dims.height, dims.width, rows)
    }

    /// Parameters in canonical order: grid, then each head's layers.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![self.grid.values()];
        for h in &self.heads {
            v.extend(h.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![self.grid.values_mut()];
        for h in &mut self.heads {
            v.extend(h.params_mut());
        }
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["sem.grid".to_string()];
        for (i, h) in self.heads.iter().enumerate() {
            for k in 0..h.layers().len() {
                v.push(format!("sem.head{i}.layer{k}.w"));
                v.push(format!("sem.head{i}.layer{k}.b"));
            }
        }
        v
    }

    pub fn checksum(&self) -> u64 {
        self.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| {
            (h ^ t.checksum()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

fn apply_head(head: &Mlp, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; head.output_dim()];
    head.forward_row(x, &mut MlpScratch::default(), &mut out);
    out
}

/// Quadrature weights of the frozen base field for every pixel ray of a
/// pose, flattened for batched rendering. Zero-weight samples are dropped.
#[derive(Clone, Debug, Default)]
pub struct RayWeights {
    pub points: Vec<Vec3>,
    pub weights: Vec<f32>,
    pub ray: Vec<u32>,
    pub rays: usize,
}

impl RayWeights {
    pub fn from_pose(base: &RadianceField, pose: &CameraPose, dims: FeatureDims) -> Result<Self> {
        let rays = camera::all_rays(&pose.with_size(dims.width, dims.height));
        let mut out = Self {
            rays: rays.len(),
            ..Self::default()
        };
        for (r, ray) in rays.iter().enumerate() {
            let s = base.trace(ray)?.samples;
            for (&p, &w) in s.positions.iter().zip(&s.weights) {
                if w > 0.0 {
                    out.points.push(p);
                    out.weights.push(w);
                    out.ray.push(r as u32);
                }
            }
        }
        Ok(out)
    }
}

/// Renders every scale on a tape: trilinear lookup of all sample points,
/// weighted per-ray accumulation, then the scale's head.
fn render_tape<'p>(
    tape: &mut Tape<'p>,
    sem: &'p SemanticField,
    grid: Var,
    heads: &[MlpVars],
    weights: &[RayWeights],
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(weights.len());
    for (i, rw) in weights.iter().enumerate() {
        let acc = if rw.points.is_empty() {
            tape.constant(Tensor::zeros(&[rw.rays, sem.grid.channels()]))
        } else {
            let coeffs = Rc::new(sem.grid.coefficients(&rw.points));
            let feats = tape.trilinear(grid, coeffs)?;
            tape.ray_accumulate(feats, Rc::new(rw.weights.clone()), Rc::new(rw.ray.clone()), rw.rays)?
        };
        out.push(sem.heads[i].forward_tape(tape, &heads[i], acc)?);
    }
    Ok(out)
}

/// Sampled pixel positions for the correlation loss of each scale.
pub type Positions = Vec<Vec<usize>>;

/// Up to `k` distinct pixel indices of `n`, all of them when `n <= k`.
pub fn sample_positions(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

/// Loss value split into its terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub single: f32,
    pub cross: f32,
}

impl LossParts {
    pub fn total(&self) -> f32 {
        self.single + self.cross
    }
}

/// Imitation loss of the semantic field against teacher maps and its
/// gradient for every tensor of [`SemanticField::params`]. With
/// `positions`, the cross-scale correlation term is added for every pair
/// of scales.
pub fn imitation_loss_grad(
    sem: &SemanticField,
    weights: &[RayWeights],
    targets: &[FeatureMap],
    positions: Option<&Positions>,
) -> Result<(LossParts, Vec<Tensor>)> {
    if weights.len() != sem.num_scales() || targets.len() != sem.num_scales() {
        return Err(contract(format!(
            "{} scales, {} weight sets, {} targets",
            sem.num_scales(),
            weights.len(),
            targets.len()
        )));
    }
    for (rw, t) in weights.iter().zip(targets) {
        if rw.rays != t.pixels() {
            return Err(contract(format!(
                "{} rays rendered for a {}x{} target",
                rw.rays,
                t.width(),
                t.height()
            )));
        }
    }
    let mut tape = Tape::new();
    let grid = tape.param(sem.grid.values());
    let heads: Vec<MlpVars> = sem.heads.iter().map(|h| h.register(&mut tape)).collect();
    let preds = render_tape(&mut tape, sem, grid, &heads, weights)?;
    let mut single = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        let tv = tape.constant(t.rows_tensor());
        single.push(tape.mse(*p, tv)?);
    }
    let mut total = sum_vars(&mut tape, &single)?;
    let mut parts = LossParts {
        single: tape.value(total).item(),
        cross: 0.0,
    };
    if let Some(pos) = positions {
        let cross = cross_terms(&mut tape, &preds, targets, pos)?;
        if !cross.is_empty() {
            let c = sum_vars(&mut tape, &cross)?;
            parts.cross = tape.value(c).item();
            total = tape.add(total, c)?;
        }
    }
    let mut grads = tape.backward(total)?;
    let mut out = vec![grads.take(grid)?];
    for h in &heads {
        for &(w, b) in &h.layers {
            out.push(grads.take(w)?);
            out.push(grads.take(b)?);
        }
    }
    Ok((parts, out))
}

fn sum_vars(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Mean squared difference of predicted and target similarity maps for
/// every pair `i < j`.
fn cross_terms(tape: &mut Tape<'_>, preds: &[Var], targets: &[FeatureMap], pos: &Positions) -> Result<Vec<Var>> {
    if pos.len() != targets.len() {
        return Err(contract("one position list per scale"));
    }
    let mut gathered = Vec::with_capacity(preds.len());
    for (p, idx) in preds.iter().zip(pos) {
        gathered.push(tape.gather_rows(*p, idx)?);
    }
    let mut out = Vec::new();
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let s_hat = tape.cosine_matrix(gathered[i], gathered[j])?;
            let s = similarity_map(&targets[i], &targets[j], &pos[i], &pos[j])?;
            let cols = s.cols() as f32;
            let sv = tape.constant(s);
            let m = tape.mse(s_hat, sv)?;
            out.push(tape.scale(m, 1.0 / cols)?);
        }
    }
    Ok(out)
}

/// Cosine similarity between features of `a` at `pa` and of `b` at `pb`,
/// giving `[pa.len(), pb.len()]`. Zero vectors have similarity 0.
pub fn similarity_map(a: &FeatureMap, b: &FeatureMap, pa: &[usize], pb: &[usize]) -> Result<Tensor> {
    if pa.is_empty() || pb.is_empty() {
        return Err(contract("similarity map needs sampled positions"));
    }
    if a.channels() != b.channels() {
        return Err(contract("similarity map of maps with different channels"));
    }
    if pa.iter().any(|&p| p >= a.pixels()) || pb.iter().any(|&p| p >= b.pixels()) {
        return Err(contract("similarity position outside the map"));
    }
    let mut data = Vec::with_capacity(pa.len() * pb.len());
    for &p in pa {
        for &q in pb {
            data.push(cosine(a.row(p), b.row(q)));
        }
    }
    Tensor::new(vec![pa.len(), pb.len()], data)
}

/// `(1/N) sum_r ||F(r) - F_hat(r)||^2` over the `N` pixels of the map.
pub fn loss_single(pred: &FeatureMap, target: &FeatureMap) -> Result<f32> {
    if pred.dims() != target.dims() {
        return Err(contract(format!(
            "feature map dims {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let s: f32 = pred
        .values
        .data()
        .iter()
        .zip(target.values.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.pixels() as f32)
}

/// Sum of per-scale feature losses plus, for every pair of scales, the
/// mean squared difference of the similarity maps at `positions`.
pub fn loss_multi(preds: &[FeatureMap], targets: &[FeatureMap], positions: &Positions) -> Result<LossParts> {
    if preds.len() != targets.len() || positions.len() != preds.len() {
        return Err(contract(format!(
            "{} predicted scales, {} target scales, {} position lists",
            preds.len(),
            targets.len(),
            positions.len()
        )));
    }
    let mut parts = LossParts::default();
    for (p, t) in preds.iter().zip(targets) {
        parts.single += loss_single(p, t)?;
    }
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let s_hat = similarity_map(&preds[i], &preds[j], &positions[i], &positions[j])?;
            let s = similarity_map(&targets[i], &targets[j], &positions[i], &positions[j])?;
            let d: f32 = s_hat.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            parts.cross += d / s.len() as f32;
        }
    }
    Ok(parts)
}
