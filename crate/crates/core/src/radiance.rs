//! Grid radiance field: density and colour decoded from two feature grids
//! and rendered by quadrature along camera rays.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::camera::{self, CameraPose, Ray};
use crate::config::TrainConfig;
use crate::error::{contract, Error, Result};
use crate::grid::FeatureGrid;
use crate::math::{Aabb, Vec3};
use crate::mlp::{Mlp, MlpScratch};
use crate::optim::Adam;
use crate::scene::{oracle_render, Dataset};
use crate::tensor::{sigmoid, trunc_exp, Tensor};

/// Rays stop marching once transmittance falls below this in fast renders.
pub const MIN_TRANSMITTANCE: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    pub geo_grid: FeatureGrid,
    pub rgb_grid: FeatureGrid,
    /// Grid features to one pre-activation density value.
    pub geo_head: Mlp,
    /// Grid features to three pre-activation colour values.
    pub rgb_head: Mlp,
    pub samples_per_ray: usize,
}

/// Per-sample quadrature terms along one ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub deltas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub transmittances: Vec<f32>,
    pub weights: Vec<f32>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn weight_sum(&self) -> f32 {
        self.weights.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayRender {
    pub color: [f32; 3],
    pub samples: RaySamples,
}

/// Quadrature terms `(alpha, T, T * alpha)` for densities and step lengths.
pub fn quadrature(sigmas: &[f32], deltas: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut alphas = Vec::with_capacity(sigmas.len());
    let mut trans = Vec::with_capacity(sigmas.len());
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut t = 1.0f32;
    for (&s, &d) in sigmas.iter().zip(deltas) {
        let keep = (-s * d).exp();
        let a = 1.0 - keep;
        alphas.push(a);
        trans.push(t);
        weights.push(t * a);
        t *= keep;
    }
    (alphas, trans, weights)
}

/// Sample distances and step lengths over `[t0, t1]`. With an rng each
/// sample is jittered uniformly inside its stratum, otherwise it sits at
/// the stratum midpoint. The last step runs to `t1`.
pub fn sample_interval(t0: f32, t1: f32, n: usize, rng: Option<&mut dyn RngCore>) -> (Vec<f32>, Vec<f32>) {
    let width = (t1 - t0) / n as f32;
    let ts: Vec<f32> = match rng {
        Some(rng) => (0..n).map(|i| t0 + (i as f32 + rng.gen::<f32>()) * width).collect(),
        None => (0..n).map(|i| t0 + (i as f32 + 0.5) * width).collect(),
    };
    let mut deltas: Vec<f32> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = ts.last() {
        deltas.push(t1 - last);
    }
    (ts, deltas)
}

#[derive(Default)]
struct Scratch {
    feat: Vec<f32>,
    mlp: MlpScratch,
}

impl RadianceField {
    pub fn new(
        bounds: Aabb,
        resolution: usize,
        channels: usize,
        hidden: usize,
        samples_per_ray: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let res = [resolution; 3];
        Self::from_parts(
            FeatureGrid::uniform(res, channels, bounds, GRID_INIT, rng)?,
            FeatureGrid::uniform(res, channels, bounds, GRID_INIT, rng)?,
            Mlp::new(&[channels, hidden, 1], rng)?,
            Mlp::new(&[channels, hidden, 3], rng)?,
            samples_per_ray,
        )
    }

    pub fn from_config(cfg: &TrainConfig, bounds: Aabb, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            bounds,
            cfg.grid_resolution,
            cfg.grid_channels,
            cfg.head_hidden,
            cfg.samples_per_ray,
            rng,
        )
    }

    pub fn from_parts(
        geo_grid: FeatureGrid,
        rgb_grid: FeatureGrid,
        geo_head: Mlp,
        rgb_head: Mlp,
        samples_per_ray: usize,
    ) -> Result<Self> {
        if geo_head.input_dim() != geo_grid.channels() || geo_head.output_dim() != 1 {
            return Err(contract("geometry head must map grid channels to 1"));
        }
        if rgb_head.input_dim() != rgb_grid.channels() || rgb_head.output_dim() != 3 {
            return Err(contract("colour head must map grid channels to 3"));
        }
        if geo_grid.bounds() != rgb_grid.bounds() {
            return Err(contract("geometry and colour grids must share bounds"));
        }
        if samples_per_ray < 2 {
            return Err(contract("samplesPerRay must be at least 2"));
        }
        Ok(Self {
            geo_grid,
            rgb_grid,
            geo_head,
            rgb_head,
            samples_per_ray,
        })
    }

    pub fn bounds(&self) -> Aabb {
        self.geo_grid.bounds()
    }

    /// `sigma = exp(geo_head(E_geo(x)))`.
    pub fn query_density(&self, x: Vec3) -> f32 {
        let mut s = Scratch::default();
        self.density_with(x, &mut s)
    }

    /// `c = sigmoid(rgb_head(E_rgb(x)))`.
    pub fn query_color(&self, x: Vec3) -> [f32; 3] {
        let mut s = Scratch::default();
        self.color_with(x, &mut s)
    }

    fn density_with(&self, x: Vec3, s: &mut Scratch) -> f32 {
        s.feat.resize(self.geo_grid.channels(), 0.0);
        self.geo_grid.query_into(x, &mut s.feat);
        let mut out = [0.0f32];
        self.geo_head.forward_row(&s.feat, &mut s.mlp, &mut out);
        trunc_exp(out[0])
    }

    fn color_with(&self, x: Vec3, s: &mut Scratch) -> [f32; 3] {
        s.feat.resize(self.rgb_grid.channels(), 0.0);
        self.rgb_grid.query_into(x, &mut s.feat);
        let mut out = [0.0f32; 3];
        self.rgb_head.forward_row(&s.feat, &mut s.mlp, &mut out);
        out.map(sigmoid)
    }

    /// Exact quadrature with `samples_per_ray` samples over the part of the
    /// ray inside the field bounds; stratified when `rng` is given.
    pub fn render_ray(&self, ray: &Ray, rng: Option<&mut dyn RngCore>) -> Result<RayRender> {
        self.march(ray, rng, 0.0, 0.0)
    }

    /// Midpoint quadrature that stops once transmittance drops below
    /// [`MIN_TRANSMITTANCE`] and skips colour lookups of samples whose
    /// weight is negligible. Used for inference and image rendering.
    pub fn trace(&self, ray: &Ray) -> Result<RayRender> {
        self.march(ray, None, MIN_TRANSMITTANCE, 1e-6)
    }

    fn march(&self, ray: &Ray, rng: Option<&mut dyn RngCore>, min_trans: f32, min_weight: f32) -> Result<RayRender> {
        if !(ray.t_far > ray.t_near) {
            return Err(contract(format!(
                "degenerate ray interval [{}, {}]",
                ray.t_near, ray.t_far
            )));
        }
        let Some(r) = ray.clip(&self.bounds()) else {
            return Ok(RayRender::default());
        };
        let n = self.samples_per_ray;
        let (ts, deltas) = sample_interval(r.t_near, r.t_far, n, rng);
        let mut s = Scratch::default();
        let mut out = RayRender::default();
        let smp = &mut out.samples;
        let mut trans = 1.0f32;
        for (&t, &d) in ts.iter().zip(&deltas) {
            if trans < min_trans {
                break;
            }
            let p = r.at(t);
            let sigma = self.density_with(p, &mut s);
            let keep = (-sigma * d).exp();
            let alpha = 1.0 - keep;
            let w = trans * alpha;
            if w > min_weight {
                let c = self.color_with(p, &mut s);
                for k in 0..3 {
                    out.color[k] += w * c[k];
                }
            }
            smp.positions.push(p);
            smp.deltas.push(d);
            smp.alphas.push(alpha);
            smp.transmittances.push(trans);
            smp.weights.push(w);
            trans *= keep;
        }
        Ok(out)
    }

    /// Fast render of every pixel of `pose`, row-major.
    pub fn render_image(&self, pose: &CameraPose) -> Vec<[f32; 3]> {
        camera::all_rays(pose)
            .iter()
            .map(|r| self.trace(r).map(|o| o.color).unwrap_or([0.0; 3]))
            .collect()
    }

    /// Parameters in canonical order: geometry grid, colour grid, then the
    /// weight and bias of every geometry-head and colour-head layer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![self.geo_grid.values(), self.rgb_grid.values()];
        v.extend(self.geo_head.params());
        v.extend(self.rgb_head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![self.geo_grid.values_mut(), self.rgb_grid.values_mut()];
        v.extend(self.geo_head.params_mut());
        v.extend(self.rgb_head.params_mut());
        v
    }

    /// Checkpoint names matching [`RadianceField::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["geo.grid".to_string(), "rgb.grid".to_string()];
        for (prefix, head) in [("geo", &self.geo_head), ("rgb", &self.rgb_head)] {
            for k in 0..head.layers().len() {
                v.push(format!("{prefix}.head.layer{k}.w"));
                v.push(format!("{prefix}.head.layer{k}.b"));
            }
        }
        v
    }

    /// Order-sensitive hash of every parameter value.
    pub fn checksum(&self) -> u64 {
        self.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| {
            (h ^ t.checksum()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

const GRID_INIT: f32 = 0.1;

/// Fixed sample positions and targets for a batch of rays, so the loss is
/// a deterministic function of the field parameters.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub points: Vec<Vec3>,
    pub deltas: Vec<f32>,
    pub per_ray: usize,
    pub targets: Vec<[f32; 3]>,
}

impl RayBatch {
    /// Samples every ray over its in-bounds interval. Rays missing the
    /// bounds get zero-length steps and therefore render black.
    pub fn new(
        rays: &[Ray],
        targets: &[[f32; 3]],
        per_ray: usize,
        bounds: &Aabb,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Self> {
        if rays.is_empty() || rays.len() != targets.len() || per_ray < 2 {
            return Err(contract(format!(
                "ray batch: {} rays, {} targets, {per_ray} samples",
                rays.len(),
                targets.len()
            )));
        }
        let mut points = Vec::with_capacity(rays.len() * per_ray);
        let mut deltas = Vec::with_capacity(rays.len() * per_ray);
        for ray in rays {
            match ray.clip(bounds) {
                Some(r) => {
                    let jitter = rng.as_mut().map(|g| &mut **g as &mut dyn RngCore);
                    let (ts, ds) = sample_interval(r.t_near, r.t_far, per_ray, jitter);
                    points.extend(ts.iter().map(|&t| r.at(t)));
                    deltas.extend(ds);
                }
                None => {
                    points.extend(std::iter::repeat_n(bounds.clamp(ray.origin), per_ray));
                    deltas.extend(std::iter::repeat_n(0.0, per_ray));
                }
            }
        }
        Ok(Self {
            points,
            deltas,
            per_ray,
            targets: targets.to_vec(),
        })
    }

    pub fn rays(&self) -> usize {
        self.targets.len()
    }
}

/// Photometric loss `(1/R) sum_r ||C(r) - C_hat(r)||^2`.
pub fn nerf_loss(field: &RadianceField, batch: &RayBatch) -> Result<f32> {
    Ok(loss_impl(field, batch, false)?.0)
}

/// Loss and its gradient for every tensor of [`RadianceField::params`].
pub fn nerf_loss_grad(field: &RadianceField, batch: &RayBatch) -> Result<(f32, Vec<Tensor>)> {
    loss_impl(field, batch, true)
}

fn loss_impl(field: &RadianceField, batch: &RayBatch, grad: bool) -> Result<(f32, Vec<Tensor>)> {
    let coeffs = Rc::new(field.geo_grid.coefficients(&batch.points));
    let rgb_coeffs = if field.rgb_grid.same_layout(&field.geo_grid) {
        coeffs.clone()
    } else {
        Rc::new(field.rgb_grid.coefficients(&batch.points))
    };
    let mut tape = Tape::new();
    let geo = tape.param(field.geo_grid.values());
    let rgb = tape.param(field.rgb_grid.values());
    let gv = field.geo_head.register(&mut tape);
    let rv = field.rgb_head.register(&mut tape);
    let fg = tape.trilinear(geo, coeffs)?;
    let h = field.geo_head.forward_tape(&mut tape, &gv, fg)?;
    let sigma = tape.exp(h)?;
    let fr = tape.trilinear(rgb, rgb_coeffs)?;
    let c = field.rgb_head.forward_tape(&mut tape, &rv, fr)?;
    let c = tape.sigmoid(c)?;
    let out = tape.composite(sigma, c, Rc::new(batch.deltas.clone()), batch.per_ray)?;
    let target = Tensor::new(vec![batch.rays(), 3], batch.targets.iter().flatten().copied().collect())?;
    let target = tape.constant(target);
    let loss = tape.mse(out, target)?;
    let value = tape.value(loss).item();
    if !grad {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let mut out = vec![grads.take(geo)?, grads.take(rgb)?];
    for vars in [&gv, &rv] {
        for &(w, b) in &vars.layers {
            out.push(grads.take(w)?);
            out.push(grads.take(b)?);
        }
    }
    Ok((value, out))
}

/// `10 log10(1 / mse)` over all pixels and channels.
pub fn psnr(pred: &[[f32; 3]], target: &[[f32; 3]]) -> f64 {
    let n = (pred.len() * 3).max(1) as f64;
    let mse: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(a, b)| (0..3).map(move |k| (f64::from(a[k]) - f64::from(b[k])).powi(2)))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PsnrEval {
    pub step: usize,
    pub per_pose: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NerfLog {
    pub losses: Vec<f32>,
    pub evals: Vec<PsnrEval>,
}

impl NerfLog {
    pub fn final_psnr(&self) -> Option<f64> {
        self.evals.last().map(|e| e.mean)
    }
}

/// Held-out PSNR of `field` against oracle renders of `poses`.
pub fn evaluate_psnr(field: &RadianceField, dataset: &Dataset, poses: &[CameraPose]) -> Vec<f64> {
    poses
        .iter()
        .map(|p| {
            let oracle = oracle_render(&dataset.scene, p);
            psnr(&field.render_image(p), &oracle.rgb)
        })
        .collect()
}

/// Adam-optimises a fresh field against oracle renders of the training
/// poses, logging held-out PSNR every `eval_every` steps and at the end.
pub fn train_nerf(dataset: &Dataset, cfg: &TrainConfig) -> Result<(RadianceField, NerfLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = RadianceField::from_config(cfg, dataset.scene.bounds, &mut rng)?;
    let mut log = NerfLog::default();
    if cfg.nerf_steps == 0 {
        return Ok((field, log));
    }
    let mut rays = Vec::new();
    let mut colors = Vec::new();
    for pose in &dataset.train {
        let frame = oracle_render(&dataset.scene, pose);
        rays.extend(camera::all_rays(pose));
        colors.extend(frame.rgb);
    }
    let mut adam = Adam::new(cfg.nerf_adam(), field.params());
    let mut order: Vec<usize> = (0..rays.len()).collect();
    let mut cursor = order.len();
    let bounds = field.bounds();
    for step in 0..cfg.nerf_steps {
        let mut batch_rays = Vec::with_capacity(cfg.rays_per_step);
        let mut batch_cols = Vec::with_capacity(cfg.rays_per_step);
        for _ in 0..cfg.rays_per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_rays.push(rays[order[cursor]]);
            batch_cols.push(colors[order[cursor]]);
            cursor += 1;
        }
        let batch = RayBatch::new(&batch_rays, &batch_cols, cfg.samples_per_ray, &bounds, Some(&mut rng))?;
        let (loss, grads) = nerf_loss_grad(&field, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("photometric loss {loss}"),
            });
        }
        adam.step(&mut field.params_mut(), &grads)?;
        log.losses.push(loss);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.nerf_steps {
            let per_pose = evaluate_psnr(&field, dataset, &dataset.test);
            let mean = per_pose.iter().sum::<f64>() / per_pose.len().max(1) as f64;
            log::info!("nerf step {done}: loss {loss:.5}, test psnr {mean:.2} dB");
            log.evals.push(PsnrEval {
                step: done,
                per_pose,
                mean,
            });
        }
    }
    Ok((field, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Layer};

    fn constant_head(input: usize, out: usize, bias: f32) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: Tensor::zeros(&[input, out]),
            bias: Tensor::full(&[out], bias),
            activation: Activation::None,
        }])
        .unwrap()
    }

    fn constant_field(log_sigma: f32, color_logit: f32, samples: usize) -> RadianceField {
        let g = FeatureGrid::zeros([2, 2, 2], 1, Aabb::cube(1.0)).unwrap();
        RadianceField::from_parts(
            g.clone(),
            g,
            constant_head(1, 1, log_sigma),
            constant_head(1, 3, color_logit),
            samples,
        )
        .unwrap()
    }

    fn axis_ray() -> Ray {
        Ray {
            origin: [0.0, 0.0, 3.0],
            direction: [0.0, 0.0, -1.0],
            t_near: 0.0,
            t_far: 10.0,
        }
    }

    #[test]
    fn zero_field_has_unit_density() {
        let g = FeatureGrid::zeros([3, 3, 3], 2, Aabb::cube(1.0)).unwrap();
        let f = RadianceField::from_parts(g.clone(), g, constant_head(2, 1, 0.0), constant_head(2, 3, 0.0), 4).unwrap();
        assert_eq!(f.query_density([0.3, -0.2, 0.9]), 1.0);
        assert_eq!(f.query_color([0.0; 3]), [0.5; 3]);
    }

    #[test]
    fn midpoint_density_follows_interpolation() {
        let mut geo = FeatureGrid::zeros([2, 2, 2], 1, Aabb::cube(1.0)).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                geo.vertex_mut(1, j, k)[0] = 4f32.ln();
            }
        }
        let head = Mlp::from_layers(vec![Layer {
            weight: Tensor::full(&[1, 1], 1.0),
            bias: Tensor::zeros(&[1]),
            activation: Activation::None,
        }])
        .unwrap();
        let rgb = FeatureGrid::zeros([2, 2, 2], 1, Aabb::cube(1.0)).unwrap();
        let f = RadianceField::from_parts(geo, rgb, head, constant_head(1, 3, 0.0), 4).unwrap();
        assert!((f.query_density([0.0, 0.0, 0.0]) - 2.0).abs() < 1e-5);
        assert!((f.query_density([1.0, 1.0, 1.0]) - 4.0).abs() < 1e-5);
    }

    #[test]
    fn vacuum_renders_black() {
        let f = constant_field(-200.0, 0.0, 16);
        let out = f.render_ray(&axis_ray(), None).unwrap();
        assert_eq!(out.color, [0.0; 3]);
        assert!(out.samples.weights.iter().all(|&w| w == 0.0));
        assert!(out.samples.transmittances.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn two_sample_quadrature_by_hand() {
        let (alphas, trans, weights) = quadrature(&[1.0, 1.0], &[0.5, 0.5]);
        let a = 1.0 - (-0.5f32).exp();
        assert!((alphas[0] - a).abs() < 1e-6 && (alphas[1] - a).abs() < 1e-6);
        assert_eq!(trans[0], 1.0);
        let c = [weights[0], weights[1], 0.0];
        assert!((c[0] - 0.39347).abs() < 1e-5);
        assert!((c[1] - 0.23865).abs() < 1e-5);
    }

    #[test]
    fn opaque_front_returns_first_colour() {
        let (_, _, w) = quadrature(&[1e9, 3.0, 3.0], &[1.0, 1.0, 1.0]);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn homogeneous_medium_converges() {
        // The bounded interval along the z axis has length 2.
        let (ls, c) = (0.7f32, 0.3f32);
        let f = constant_field(ls, (c / (1.0 - c)).ln(), 512);
        let out = f.render_ray(&axis_ray(), None).unwrap();
        let expect = c * (1.0 - (-ls.exp() * 2.0).exp());
        for k in 0..3 {
            assert!((out.color[k] - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn transmittance_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = RadianceField::new(Aabb::cube(1.0), 6, 4, 8, 32, &mut rng).unwrap();
        let out = f.render_ray(&axis_ray(), Some(&mut rng)).unwrap();
        let s = &out.samples;
        assert_eq!(s.transmittances[0], 1.0);
        assert!(s.transmittances.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(s.weight_sum() <= 1.0 + 1e-6);
    }

    #[test]
    fn degenerate_ray_rejected() {
        let f = constant_field(0.0, 0.0, 4);
        let mut r = axis_ray();
        r.t_far = r.t_near;
        assert!(f.render_ray(&r, None).is_err());
    }

    #[test]
    fn loss_conventions() {
        let f = constant_field(-200.0, 0.0, 4);
        let ray = axis_ray();
        let b = RayBatch::new(&[ray], &[[1.0, 1.0, 1.0]], 4, &f.bounds(), None).unwrap();
        assert!((nerf_loss(&f, &b).unwrap() - 3.0).abs() < 1e-6);
        let b = RayBatch::new(&[ray], &[[0.0; 3]], 4, &f.bounds(), None).unwrap();
        assert_eq!(nerf_loss(&f, &b).unwrap(), 0.0);
    }

    #[test]
    fn psnr_of_uniform_error() {
        let p = vec![[0.5f32; 3]; 4];
        let t = vec![[0.6f32; 3]; 4];
        assert!((psnr(&p, &t) - 20.0).abs() < 1e-4);
    }
}
