//! Semantic feature imitation: the FIFO feature cache, the training loop
//! against a frozen radiance field, mask evaluation and inference timing.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraPose};
use crate::config::TrainConfig;
use crate::error::{contract, Error, Result};
use crate::image::RgbImage;
use crate::optim::Adam;
use crate::radiance::RadianceField;
use crate::scene::{oracle_render, Dataset};
use crate::semantic::{
    imitation_loss_grad, loss_single, sample_positions, FeatureMap, RayWeights, SemanticField, SurfaceCaster,
};
use crate::teacher::{iou, median, PromptEntry, Teacher, TeacherKind, PATCH};

/// A camera view and the teacher features of its rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub pose: CameraPose,
    pub features: Vec<FeatureMap>,
}

/// Bounded FIFO of recent fresh entries, replayed at random with a fixed
/// probability once the warm-up is over.
#[derive(Clone, Debug)]
pub struct FeatureCache<T = CacheEntry> {
    capacity: usize,
    hit_probability: f64,
    warmup: usize,
    entries: VecDeque<T>,
    rng: ChaCha8Rng,
    draws: usize,
    fresh: usize,
}

impl<T> FeatureCache<T> {
    pub fn new(capacity: usize, hit_probability: f64, warmup: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(contract("cache capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&hit_probability) {
            return Err(contract(format!("hit probability {hit_probability} outside [0, 1]")));
        }
        Ok(Self {
            capacity,
            hit_probability,
            warmup,
            entries: VecDeque::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
            fresh: 0,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(
            cfg.cache_capacity,
            cfg.cache_hit_probability,
            cfg.warmup_fresh_steps,
            cfg.seed ^ 0xcac4e,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }

    /// Total draws and how many of them took the fresh path.
    pub fn draws(&self) -> (usize, usize) {
        (self.draws, self.fresh)
    }

    /// Appends `entry`, returning the evicted oldest entry when full.
    pub fn insert(&mut self, entry: T) -> Option<T> {
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(entry);
        evicted
    }

    /// One training draw. Fresh draws call `make_fresh` and insert its
    /// result; hits return a uniformly chosen cached entry. Returns the
    /// entry and whether it was fresh.
    pub fn get_or_sample(&mut self, make_fresh: impl FnOnce() -> Result<T>) -> Result<(&T, bool)> {
        let step = self.draws;
        self.draws += 1;
        let hit = step >= self.warmup && self.rng.gen_bool(self.hit_probability);
        if hit && !self.entries.is_empty() {
            let i = self.rng.gen_range(0..self.entries.len());
            return Ok((&self.entries[i], false));
        }
        if hit {
            log::warn!("cache hit drawn on an empty cache at step {step}; generating fresh");
        }
        let entry = make_fresh()?;
        self.fresh += 1;
        self.insert(entry);
        Ok((self.entries.back().expect("just inserted"), true))
    }
}

/// Per-run record of semantic training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SemLog {
    pub losses: Vec<f32>,
    pub fresh_steps: usize,
    pub encode_calls: u64,
    /// Training time excluding the monitor callback.
    pub wall_time_s: f64,
}

/// Generates a supervision view: an augmented (or plain training) pose,
/// rendered by the frozen field at `resolution` and encoded by the teacher.
pub fn fresh_entry(
    base: &RadianceField,
    teacher: &Teacher,
    train: &[CameraPose],
    resolution: u32,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<CacheEntry> {
    let pose = if augment {
        camera::sample_augmented_pose(train, rng)?
    } else {
        if train.is_empty() {
            return Err(contract("no training poses"));
        }
        train[rng.gen_range(0..train.len())].clone()
    }
    .with_size(resolution, resolution);
    let image = render_rgb(base, &pose);
    let features = teacher.encode(&image)?;
    Ok(CacheEntry { pose, features })
}

/// Frozen-field render clamped to the teacher's input range.
pub fn render_rgb(base: &RadianceField, pose: &CameraPose) -> RgbImage {
    let pixels = base
        .render_image(pose)
        .into_iter()
        .map(|p| p.map(|v| v.clamp(0.0, 1.0)))
        .collect();
    RgbImage {
        width: pose.width,
        height: pose.height,
        pixels,
    }
}

/// Trains `sem` in place to imitate the teacher on views of the frozen
/// `base`. `monitor` runs every `eval_every` steps and after the last one;
/// its time is excluded from the logged wall time. On a non-finite loss
/// or gradient the field keeps its last good parameters and
/// [`Error::Diverged`] is returned.
pub fn train_semantic(
    base: &RadianceField,
    sem: &mut SemanticField,
    teacher: &Teacher,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut monitor: impl FnMut(usize, &SemanticField) -> Result<()>,
) -> Result<SemLog> {
    cfg.validate()?;
    let resolution = cfg.image_resolution();
    let dims = teacher.feature_dims(resolution, resolution);
    if dims != sem.feature_dims {
        return Err(contract(format!(
            "semantic field renders {:?}, teacher produces {dims:?}",
            sem.feature_dims
        )));
    }
    let mut log = SemLog::default();
    if cfg.sem_steps == 0 {
        return Ok(log);
    }
    let calls_before = teacher.encode_calls();
    let mut cache = FeatureCache::from_config(cfg)?;
    let mut pose_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x905e);
    let mut pos_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0e1);
    let mut adam = Adam::new(cfg.sem_adam(), sem.params());
    let multi = sem.num_scales() > 1 && cfg.correlation_loss;
    let mut elapsed = Duration::ZERO;
    let mut started = Instant::now();
    for step in 0..cfg.sem_steps {
        let (entry, fresh) = cache.get_or_sample(|| {
            fresh_entry(
                base,
                teacher,
                &dataset.train,
                resolution,
                cfg.camera_augmentation,
                &mut pose_rng,
            )
        })?;
        log.fresh_steps += usize::from(fresh);
        let weights = dims
            .iter()
            .map(|d| RayWeights::from_pose(base, &entry.pose, *d))
            .collect::<Result<Vec<_>>>()?;
        let positions = multi.then(|| {
            dims.iter()
                .map(|d| sample_positions(d.pixels(), cfg.correlation_samples, &mut pos_rng))
                .collect::<Vec<_>>()
        });
        let (parts, grads) = imitation_loss_grad(sem, &weights, &entry.features, positions.as_ref())?;
        let loss = parts.total();
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("imitation loss {loss}"),
            });
        }
        adam.step(&mut sem.params_mut(), &grads)?;
        log.losses.push(loss);
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.sem_steps {
            elapsed += started.elapsed();
            log::info!("semantic step {done}: loss {loss:.5}, fresh {}", log.fresh_steps);
            monitor(done, sem)?;
            started = Instant::now();
        }
    }
    log.wall_time_s = elapsed.as_secs_f64();
    log.encode_calls = teacher.encode_calls() - calls_before;
    Ok(log)
}

/// How masks are requested during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind", content = "value")]
pub enum Protocol {
    /// An `n x n` grid of clicks at cell centres.
    Clicks(u32),
    Prompts(Vec<String>),
}

impl Protocol {
    pub fn for_teacher(teacher: &Teacher) -> Self {
        match teacher.kind() {
            TeacherKind::SingleScale => Self::Clicks(5),
            TeacherKind::MultiScale => Self::Prompts(teacher.spec().prompt_names()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IouEntry {
    pub pose: usize,
    pub prompt: String,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaskIou {
    pub mean: f64,
    pub entries: Vec<IouEntry>,
}

/// Feature and mask agreement between the imitated and teacher paths.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SemEval {
    /// Mean per-pixel squared error to the teacher map, per scale.
    pub feature_mse: Vec<f64>,
    pub mask_iou: MaskIou,
}

/// Renders `poses` at `resolution`, decodes masks from the imitated
/// features and from the teacher's encoding of the same RGB render, and
/// compares them.
pub fn evaluate_iou(
    base: &RadianceField,
    sem: &SemanticField,
    teacher: &Teacher,
    poses: &[CameraPose],
    protocol: &Protocol,
    resolution: u32,
    surface: Option<&dyn SurfaceCaster>,
) -> Result<SemEval> {
    let mut out = SemEval {
        feature_mse: vec![0.0; sem.num_scales()],
        ..SemEval::default()
    };
    for (pi, pose) in poses.iter().enumerate() {
        let pose = pose.with_size(resolution, resolution);
        let target = teacher.encode(&render_rgb(base, &pose))?;
        let pred = (0..sem.num_scales())
            .map(|s| sem.render_feature_map(base, &pose, s, surface))
            .collect::<Result<Vec<_>>>()?;
        if pred.len() != target.len() {
            return Err(contract(format!(
                "{} imitated scales for {} teacher scales",
                pred.len(),
                target.len()
            )));
        }
        for (acc, (p, t)) in out.feature_mse.iter_mut().zip(pred.iter().zip(&target)) {
            *acc += f64::from(loss_single(p, t)?) / poses.len() as f64;
        }
        match protocol {
            Protocol::Clicks(n) => {
                for (u, v) in click_grid(*n, resolution, resolution) {
                    let a = teacher.decode_click(&pred[0], (u, v), resolution, resolution)?;
                    let b = teacher.decode_click(&target[0], (u, v), resolution, resolution)?;
                    out.mask_iou.entries.push(IouEntry {
                        pose: pi,
                        prompt: format!("click({u},{v})"),
                        iou: iou(&a.mask, &b.mask),
                    });
                }
            }
            Protocol::Prompts(names) => {
                for name in names {
                    let a = teacher.decode_prompt(&pred, name, resolution, resolution)?;
                    let b = teacher.decode_prompt(&target, name, resolution, resolution)?;
                    out.mask_iou.entries.push(IouEntry {
                        pose: pi,
                        prompt: name.clone(),
                        iou: iou(&a.mask, &b.mask),
                    });
                }
            }
        }
    }
    let n = out.mask_iou.entries.len();
    if n > 0 {
        out.mask_iou.mean = out.mask_iou.entries.iter().map(|e| e.iou).sum::<f64>() / n as f64;
    }
    Ok(out)
}

/// Centres of an `n x n` grid of cells over the image.
pub fn click_grid(n: u32, width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity((n * n) as usize);
    for j in 0..n {
        for i in 0..n {
            out.push(((2 * i + 1) * width / (2 * n), (2 * j + 1) * height / (2 * n)));
        }
    }
    out
}

/// Median per-frame stage times in milliseconds and the derived frame
/// rates of both inference paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Timing {
    pub rgb_render_ms: f64,
    pub feature_encode_ms: f64,
    pub feature_render_ms: f64,
    pub decode_ms: f64,
    pub fps_original: f64,
    pub fps_imitated: f64,
    /// Teacher encodes issued while timing the imitated path.
    pub imitated_encode_calls: u64,
}

impl Timing {
    pub fn from_stages(rgb: f64, encode: f64, render: f64, decode: f64) -> Self {
        Self {
            rgb_render_ms: rgb,
            feature_encode_ms: encode,
            feature_render_ms: render,
            decode_ms: decode,
            fps_original: 1000.0 / (rgb + encode + decode),
            fps_imitated: 1000.0 / (rgb + render + decode),
            imitated_encode_calls: 0,
        }
    }

    pub fn speedup(&self) -> f64 {
        self.fps_imitated / self.fps_original
    }

    /// Rows of the stage table: name, original path, imitated path. On the
    /// imitated path the encoding row holds the feature render.
    pub fn table(&self) -> Vec<(&'static str, String, String)> {
        let ms = |v: f64| format!("{v:.2}");
        vec![
            (STAGE_ROWS[0], ms(self.rgb_render_ms), ms(self.rgb_render_ms)),
            (STAGE_ROWS[1], ms(self.feature_encode_ms), ms(self.feature_render_ms)),
            (STAGE_ROWS[2], ms(self.decode_ms), ms(self.decode_ms)),
            (
                STAGE_ROWS[3],
                format!("{:.2}", self.fps_original),
                format!("{:.2}", self.fps_imitated),
            ),
        ]
    }
}

/// Row names of the stage table; times are in milliseconds.
pub const STAGE_ROWS: [&str; 4] = [
    "RGB Rendering (ms)",
    "Feature Encoding (ms)",
    "Feature Decoding (ms)",
    "FPS",
];

fn median_ms(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(5) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed());
    }
    Ok(median(&mut times).as_secs_f64() * 1e3)
}

/// Times every inference stage on `pose` at `resolution` after one warm-up
/// call each, reporting medians of `runs` (at least 5) repetitions.
pub fn benchmark_inference(
    base: &RadianceField,
    sem: &SemanticField,
    teacher: &Teacher,
    pose: &CameraPose,
    resolution: u32,
    runs: usize,
) -> Result<Timing> {
    let pose = pose.with_size(resolution, resolution);
    let image = render_rgb(base, &pose);
    let rgb = median_ms(runs, || {
        std::hint::black_box(base.render_image(&pose));
        Ok(())
    })?;
    let encode = median_ms(runs, || {
        std::hint::black_box(teacher.encode(&image)?);
        Ok(())
    })?;
    let calls = teacher.encode_calls();
    let mut features = Vec::new();
    let render = median_ms(runs, || {
        features = (0..sem.num_scales())
            .map(|s| sem.render_feature_map(base, &pose, s, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    })?;
    let decode = match teacher.kind() {
        TeacherKind::SingleScale => median_ms(runs, || {
            let c = (resolution / 2, resolution / 2);
            std::hint::black_box(teacher.decode_click(&features[0], c, resolution, resolution)?);
            Ok(())
        })?,
        TeacherKind::MultiScale => {
            let names = teacher.spec().prompt_names();
            let name = names
                .first()
                .ok_or_else(|| contract("benchmarking prompts needs a vocabulary"))?;
            median_ms(runs, || {
                std::hint::black_box(teacher.decode_prompt(&features, name, resolution, resolution)?);
                Ok(())
            })?
        }
    };
    let mut timing = Timing::from_stages(rgb, encode, render, decode);
    timing.imitated_encode_calls = teacher.encode_calls() - calls;
    Ok(timing)
}

/// Weights tried for the contrastive term of prompt embeddings.
pub const PROMPT_CONTRAST: [f32; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Builds the prompt vocabulary from object names. Each embedding is the
/// mean finest-scale teacher feature over patches lying entirely inside the
/// object, minus `lambda` times the mean over pure patches of everything
/// else, in oracle renders of the training poses. `lambda` is picked per
/// object from [`PROMPT_CONTRAST`] by mean mask IoU on those same renders.
pub fn calibrate_prompts(teacher: &Teacher, dataset: &Dataset, resolution: u32) -> Result<Vec<PromptEntry>> {
    let c = teacher.spec().channels;
    let objects = &dataset.scene.objects;
    let mut inside: Vec<(Vec<f64>, usize)> = vec![(vec![0.0; c], 0); objects.len()];
    let mut total = (vec![0.0f64; c], 0usize);
    let mut views = Vec::with_capacity(dataset.train.len());
    for pose in &dataset.train {
        let frame = oracle_render(&dataset.scene, &pose.with_size(resolution, resolution));
        let image = RgbImage::new(frame.width, frame.height, frame.rgb.clone())?;
        let features = teacher.encode(&image)?;
        let fmap = &features[0];
        for y in 0..fmap.height() {
            for x in 0..fmap.width() {
                let id = frame.object_id[((y * PATCH) * frame.width + x * PATCH) as usize];
                let pure = (0..PATCH).all(|dy| {
                    (0..PATCH)
                        .all(|dx| frame.object_id[((y * PATCH + dy) * frame.width + x * PATCH + dx) as usize] == id)
                });
                if !pure {
                    continue;
                }
                for (a, v) in total.0.iter_mut().zip(fmap.pixel(x, y)) {
                    *a += f64::from(*v);
                }
                total.1 += 1;
                if let Some(k) = objects.iter().position(|o| o.id == id) {
                    for (a, v) in inside[k].0.iter_mut().zip(fmap.pixel(x, y)) {
                        *a += f64::from(*v);
                    }
                    inside[k].1 += 1;
                }
            }
        }
        views.push((frame, features));
    }
    let mut probe = teacher.clone();
    let mut vocabulary = Vec::with_capacity(objects.len());
    for (o, (sum, n)) in objects.iter().zip(inside) {
        if n == 0 {
            return Err(contract(format!("object '{}' never fills a feature patch", o.name)));
        }
        let rest = total.1 - n;
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        let others: Vec<f64> = (0..c)
            .map(|i| {
                if rest == 0 {
                    0.0
                } else {
                    (total.0[i] - sum[i]) / rest as f64
                }
            })
            .collect();
        let mut best: Option<(f64, Vec<f32>)> = None;
        for lambda in PROMPT_CONTRAST {
            let embedding: Vec<f32> = mean
                .iter()
                .zip(&others)
                .map(|(m, r)| (m - f64::from(lambda) * r) as f32)
                .collect();
            probe.set_vocabulary(vec![PromptEntry {
                name: o.name.clone(),
                embedding: embedding.clone(),
            }])?;
            let mut score = 0.0;
            for (frame, features) in &views {
                let mask = probe.decode_prompt(features, &o.name, frame.width, frame.height)?.mask;
                score += iou(&mask, &frame.mask_of(o.id));
            }
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, embedding));
            }
        }
        let (score, embedding) = best.expect("at least one contrast weight");
        log::info!(
            "prompt '{}': training-view IoU {:.3}",
            o.name,
            score / views.len().max(1) as f64
        );
        vocabulary.push(PromptEntry {
            name: o.name.clone(),
            embedding,
        });
    }
    Ok(vocabulary)
}

/// Everything reported by one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub feature_mse: Vec<f64>,
    pub mask_iou: MaskIou,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<Timing>,
}

impl EvalReport {
    pub fn new(psnr: Vec<f64>, sem: SemEval, timing: Option<Timing>) -> Self {
        Self {
            psnr,
            feature_mse: sem.feature_mse,
            mask_iou: sem.mask_iou,
            timing,
        }
    }

    /// The report with wall-clock measurements removed.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: None,
            ..self.clone()
        }
    }
}

/// Header of the per-evaluation metrics CSV.
pub const METRICS_HEADER: &str = "step,psnr,featureMse,maskIoU,wallTime";

pub fn metrics_row(step: usize, psnr: f64, feature_mse: f64, mask_iou: f64, wall_time_s: f64) -> String {
    format!("{step},{psnr:.4},{feature_mse:.6},{mask_iou:.4},{wall_time_s:.3}")
}
