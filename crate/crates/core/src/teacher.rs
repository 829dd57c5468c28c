//! Seeded stand-in perception models: a fixed convolutional encoder and
//! lightweight click and text-prompt mask decoders.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::image::RgbImage;
use crate::semantic::{FeatureDims, FeatureMap};
use crate::tensor::{cosine, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TeacherKind {
    /// Click-prompted, one feature map at a quarter of the image size.
    SingleScale,
    /// Text-prompted, four maps at 1/4, 1/8, 1/16 and 1/32 of the image.
    MultiScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub name: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub seed: u64,
    pub channels: usize,
    pub backbone_depth: usize,
    pub cost_multiplier: u32,
    pub prompt_vocabulary: Vec<PromptEntry>,
    pub tau: f32,
    pub beta: f32,
}

/// Pooling factor from the image to the finest feature map.
pub const PATCH: u32 = 4;
pub const TAU: f32 = 10.0;
pub const BETA: f32 = 0.8;
pub const BACKBONE_DEPTH: usize = 1;
/// Scale of the eight off-centre conv taps relative to the centre tap.
pub const NEIGHBOUR_GAIN: f32 = 0.1;

impl TeacherSpec {
    pub fn single_scale(seed: u64) -> Self {
        Self {
            kind: TeacherKind::SingleScale,
            seed,
            channels: 16,
            backbone_depth: BACKBONE_DEPTH,
            cost_multiplier: 1,
            prompt_vocabulary: Vec::new(),
            tau: TAU,
            beta: BETA,
        }
    }

    /// Multi-scale teacher with an empty vocabulary; see
    /// `calibrate_prompts` in the trainer.
    pub fn multi_scale(seed: u64) -> Self {
        Self {
            kind: TeacherKind::MultiScale,
            channels: 8,
            ..Self::single_scale(seed)
        }
    }

    pub fn num_scales(&self) -> usize {
        match self.kind {
            TeacherKind::SingleScale => 1,
            TeacherKind::MultiScale => 4,
        }
    }

    /// Largest pooling factor; image sides must be multiples of it.
    pub fn granularity(&self) -> u32 {
        PATCH << (self.num_scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.backbone_depth == 0 || self.cost_multiplier == 0 {
            return Err(contract(
                "teacher needs channels, backboneDepth and costMultiplier >= 1",
            ));
        }
        if !(self.tau > 0.0) || !(-1.0..1.0).contains(&self.beta) {
            return Err(contract("teacher needs tau > 0 and beta in [-1, 1)"));
        }
        if let Some(p) = self
            .prompt_vocabulary
            .iter()
            .find(|p| p.embedding.len() != self.channels)
        {
            return Err(contract(format!(
                "prompt '{}' embedding has {} values, expected {}",
                p.name,
                p.embedding.len(),
                self.channels
            )));
        }
        Ok(())
    }

    pub fn feature_dims(&self, width: u32, height: u32) -> Vec<FeatureDims> {
        (0..self.num_scales())
            .map(|i| FeatureDims {
                height: height / (PATCH << i),
                width: width / (PATCH << i),
                channels: self.channels,
            })
            .collect()
    }

    pub fn prompt_names(&self) -> Vec<String> {
        self.prompt_vocabulary.iter().map(|p| p.name.clone()).collect()
    }
}

/// 3x3 convolution with replicate padding; weights `[out, in, 3, 3]`.
#[derive(Clone, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn seeded(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (9 * cin) as f32).sqrt();
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9)
                .map(|i| {
                    let v = rng.gen_range(-bound..bound);
                    if i % 9 == 4 {
                        v
                    } else {
                        v * NEIGHBOUR_GAIN
                    }
                })
                .collect(),
            bias: (0..cout).map(|_| rng.gen_range(0.0..0.1)).collect(),
        }
    }

    /// `x` is `[h, w, cin]`; returns relu(conv(x)) as `[h, w, cout]`.
    fn apply(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; h * w * self.cout];
        let mut patch = vec![0.0f32; 9 * self.cin];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..3 {
                    let sy = (y + dy).saturating_sub(1).min(h - 1);
                    for dx in 0..3 {
                        let sx = (xx + dx).saturating_sub(1).min(w - 1);
                        let src = &x[(sy * w + sx) * self.cin..(sy * w + sx + 1) * self.cin];
                        for (c, &v) in src.iter().enumerate() {
                            patch[c * 9 + dy * 3 + dx] = v;
                        }
                    }
                }
                let o = &mut out[(y * w + xx) * self.cout..(y * w + xx + 1) * self.cout];
                for (co, ov) in o.iter_mut().enumerate() {
                    let wrow = &self.weight[co * self.cin * 9..(co + 1) * self.cin * 9];
                    let s: f32 = wrow.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    *ov = (s + self.bias[co]).max(0.0);
                }
            }
        }
        out
    }
}

/// Seeded `C x C` linear map plus bias applied per pixel.
#[derive(Clone, Debug)]
struct Pointwise {
    c: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Pointwise {
    fn seeded(c: usize, scale: f32, rng: &mut impl Rng) -> Self {
        let bound = scale * (3.0 / c as f32).sqrt();
        Self {
            c,
            weight: (0..c * c).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: (0..c).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        }
    }

    fn apply_row(&self, x: &[f32], out: &mut [f32]) {
        for (o, (wrow, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.c).zip(&self.bias)) {
            *o = b + wrow.iter().zip(x).map(|(a, v)| a * v).sum::<f32>();
        }
    }
}

/// Decoder output: per-pixel logits at image resolution and the mask they
/// threshold to.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskResult {
    pub width: u32,
    pub height: u32,
    /// `[height, width]` logits at image resolution.
    pub logits: Tensor,
    pub mask: Vec<bool>,
    pub prompt: PromptEcho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PromptEcho {
    Click { u: u32, v: u32 },
    Text(String),
}

impl MaskResult {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub struct Teacher {
    spec: TeacherSpec,
    blocks: Vec<Conv>,
    downsample: Vec<Pointwise>,
    prompt_mix: Pointwise,
    encode_calls: AtomicU64,
}

impl std::fmt::Debug for Teacher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Teacher").field("spec", &self.spec).finish()
    }
}

impl Clone for Teacher {
    fn clone(&self) -> Self {
        Self::new(self.spec.clone()).expect("spec validated at construction")
    }
}

impl Teacher {
    pub fn new(spec: TeacherSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let c = spec.channels;
        let blocks = (0..spec.backbone_depth)
            .map(|i| Conv::seeded(if i == 0 { 3 } else { c }, c, &mut rng))
            .collect();
        let downsample = (1..spec.num_scales())
            .map(|_| Pointwise::seeded(c, 1.0, &mut rng))
            .collect();
        let prompt_mix = Pointwise::seeded(c, 0.1, &mut rng);
        Ok(Self {
            spec,
            blocks,
            downsample,
            prompt_mix,
            encode_calls: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    pub fn kind(&self) -> TeacherKind {
        self.spec.kind
    }

    /// Replaces the prompt vocabulary, keeping every other setting.
    pub fn set_vocabulary(&mut self, vocabulary: Vec<PromptEntry>) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.prompt_vocabulary = vocabulary;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Number of [`Teacher::encode`] calls so far.
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn feature_dims(&self, width: u32, height: u32) -> Vec<FeatureDims> {
        self.spec.feature_dims(width, height)
    }

    /// Encodes an image into one feature map per scale. The backbone runs
    /// `cost_multiplier` times; every pass yields the same result.
    pub fn encode(&self, image: &RgbImage) -> Result<Vec<FeatureMap>> {
        let g = self.spec.granularity();
        if !image.width.is_multiple_of(g) || !image.height.is_multiple_of(g) {
            return Err(contract(format!(
                "teacher input {}x{} must be a multiple of {g}",
                image.width, image.height
            )));
        }
        if !image.is_normalized() {
            return Err(contract("teacher input must lie in [0, 1]"));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let (h, w) = ((image.height / PATCH) as usize, (image.width / PATCH) as usize);
        let pooled = patch_pool(image);
        let mut feats = self.backbone(&pooled, h, w);
        for _ in 1..self.spec.cost_multiplier {
            feats = std::hint::black_box(self.backbone(std::hint::black_box(&pooled), h, w));
        }
        let mut maps = vec![FeatureMap::from_rows(0, h as u32, w as u32, feats)?];
        for (i, pw) in self.downsample.iter().enumerate() {
            let prev = &maps[i];
            let (ph, pwid) = (prev.height() / 2, prev.width() / 2);
            let c = self.spec.channels;
            let mut rows = vec![0.0f32; (ph * pwid) as usize * c];
            let mut avg = vec![0.0f32; c];
            for y in 0..ph {
                for x in 0..pwid {
                    avg.iter_mut().for_each(|v| *v = 0.0);
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        for (a, v) in avg.iter_mut().zip(prev.pixel(2 * x + dx, 2 * y + dy)) {
                            *a += 0.25 * v;
                        }
                    }
                    let o = (y * pwid + x) as usize * c;
                    pw.apply_row(&avg, &mut rows[o..o + c]);
                }
            }
            maps.push(FeatureMap::from_rows(i + 1, ph, pwid, rows)?);
        }
        Ok(maps)
    }

    fn backbone(&self, pooled: &[f32], h: usize, w: usize) -> Vec<f32> {
        let mut x = pooled.to_vec();
        for b in &self.blocks {
            x = b.apply(&x, h, w);
        }
        x
    }

    /// Median wall time of `runs` (at least 5) encodes, and the features.
    pub fn measure_encode_cost(&self, image: &RgbImage, runs: usize) -> Result<(Duration, Vec<FeatureMap>)> {
        let mut times = Vec::with_capacity(runs.max(5));
        let mut feats = Vec::new();
        for _ in 0..runs.max(5) {
            let t = Instant::now();
            feats = self.encode(image)?;
            times.push(t.elapsed());
        }
        Ok((median(&mut times), feats))
    }

    /// Click decoder: similarity of every pixel's upsampled feature to the
    /// feature under the click, `tau * (cos - beta)`.
    pub fn decode_click(
        &self,
        features: &FeatureMap,
        click: (u32, u32),
        width: u32,
        height: u32,
    ) -> Result<MaskResult> {
        if self.spec.kind != TeacherKind::SingleScale {
            return Err(Error::WrongTeacher("click prompts need a single-scale teacher".into()));
        }
        let (u, v) = click;
        if u >= width || v >= height {
            return Err(contract(format!("click ({u}, {v}) outside a {width}x{height} image")));
        }
        let mut q = vec![0.0f32; features.channels()];
        let (sx, sy) = scale_to(features, width, height);
        features.bilinear((u as f32 + 0.5) * sx, (v as f32 + 0.5) * sy, &mut q);
        Ok(self.decode_query(features, &q, width, height, PromptEcho::Click { u, v }))
    }

    /// Text decoder: the query mixes the prompt embedding with the global
    /// mean of the coarsest map and is matched against the finest map.
    pub fn decode_prompt(&self, features: &[FeatureMap], prompt: &str, width: u32, height: u32) -> Result<MaskResult> {
        if self.spec.kind != TeacherKind::MultiScale {
            return Err(Error::WrongTeacher("text prompts need a multi-scale teacher".into()));
        }
        if features.len() != self.spec.num_scales() {
            return Err(contract(format!(
                "{} feature maps for a {}-scale teacher",
                features.len(),
                self.spec.num_scales()
            )));
        }
        let entry = self
            .spec
            .prompt_vocabulary
            .iter()
            .find(|p| p.name == prompt)
            .ok_or_else(|| Error::UnknownPrompt {
                prompt: prompt.to_string(),
                known: self.spec.prompt_names(),
            })?;
        let coarse = &features[features.len() - 1];
        let c = self.spec.channels;
        let mut g = vec![0.0f32; c];
        for p in 0..coarse.pixels() {
            for (a, v) in g.iter_mut().zip(coarse.row(p)) {
                *a += v / coarse.pixels() as f32;
            }
        }
        let mut mixed = vec![0.0f32; c];
        self.prompt_mix.apply_row(&g, &mut mixed);
        let q: Vec<f32> = entry.embedding.iter().zip(&mixed).map(|(e, m)| e + m).collect();
        Ok(self.decode_query(&features[0], &q, width, height, PromptEcho::Text(prompt.to_string())))
    }

    fn decode_query(&self, fmap: &FeatureMap, q: &[f32], width: u32, height: u32, prompt: PromptEcho) -> MaskResult {
        let (sx, sy) = scale_to(fmap, width, height);
        let mut f = vec![0.0f32; fmap.channels()];
        let mut logits = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                fmap.bilinear((x as f32 + 0.5) * sx, (y as f32 + 0.5) * sy, &mut f);
                logits.push(self.spec.tau * (cosine(&f, q) - self.spec.beta));
            }
        }
        let mask = logits.iter().map(|&l| l > 0.0).collect();
        MaskResult {
            width,
            height,
            logits: Tensor::new(vec![height as usize, width as usize], logits).expect("logits shape"),
            mask,
            prompt,
        }
    }
}

fn scale_to(fmap: &FeatureMap, width: u32, height: u32) -> (f32, f32) {
    (fmap.width() as f32 / width as f32, fmap.height() as f32 / height as f32)
}

/// `PATCH x PATCH` average of `2x - 1`, giving `[h/PATCH, w/PATCH, 3]`.
fn patch_pool(image: &RgbImage) -> Vec<f32> {
    let (h, w) = (image.height / PATCH, image.width / PATCH);
    let norm = 1.0 / (PATCH * PATCH) as f32;
    let mut out = vec![0.0f32; (h * w * 3) as usize];
    for y in 0..image.height {
        for x in 0..image.width {
            let o = (((y / PATCH) * w + x / PATCH) * 3) as usize;
            let px = image.get(x, y);
            for k in 0..3 {
                out[o + k] += norm * (2.0 * px[k] - 1.0);
            }
        }
    }
    out
}

pub(crate) fn median(times: &mut [Duration]) -> Duration {
    times.sort_unstable();
    times[times.len() / 2]
}

/// Intersection over union of two equally sized masks; two empty masks
/// agree perfectly.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "iou of masks with different sizes");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
