//! Training configuration shared by both pipeline stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::optim::AdamConfig;

/// Every knob of the two training stages. Field names on disk are the
/// camelCase forms of the Rust names; missing fields take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct TrainConfig {
    pub nerf_steps: usize,
    pub sem_steps: usize,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    pub cache_capacity: usize,
    pub cache_hit_probability: f64,
    pub warmup_fresh_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Vertices per axis of the geometry and appearance grids.
    pub grid_resolution: usize,
    pub grid_channels: usize,
    pub head_hidden: usize,
    /// Vertices per axis of the semantic grid.
    pub sem_grid_resolution: usize,
    pub sem_channels: usize,
    pub sem_head_hidden: usize,
    /// Side of the finest teacher feature map; the teacher sees images four
    /// times larger.
    pub feature_resolution: u32,
    pub camera_augmentation: bool,
    pub correlation_loss: bool,
    /// Positions sampled per map for the cross-scale correlation loss.
    pub correlation_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            nerf_steps: 3000,
            sem_steps: 2000,
            rays_per_step: 4096,
            samples_per_ray: 64,
            lr_start: 0.01,
            lr_end: 0.001,
            cache_capacity: 256,
            cache_hit_probability: 0.75,
            warmup_fresh_steps: 64,
            seed: 0,
            eval_every: 500,
            grid_resolution: 64,
            grid_channels: 8,
            head_hidden: 16,
            sem_grid_resolution: 64,
            sem_channels: 16,
            sem_head_hidden: 64,
            feature_resolution: 32,
            camera_augmentation: true,
            correlation_loss: true,
            correlation_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Step counts may be zero (a no-op stage); every other size must be
    /// positive and the learning rate must not grow.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("raysPerStep", self.rays_per_step),
            ("cacheCapacity", self.cache_capacity),
            ("evalEvery", self.eval_every),
            ("gridChannels", self.grid_channels),
            ("headHidden", self.head_hidden),
            ("semChannels", self.sem_channels),
            ("semHeadHidden", self.sem_head_hidden),
            ("featureResolution", self.feature_resolution as usize),
            ("correlationSamples", self.correlation_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be positive")));
        }
        if self.samples_per_ray < 2 {
            return Err(contract("samplesPerRay must be at least 2"));
        }
        if self.grid_resolution < 2 || self.sem_grid_resolution < 2 {
            return Err(contract("grid resolutions must be at least 2"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(contract(format!(
                "learning rates must satisfy lrStart >= lrEnd > 0, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(0.0..=1.0).contains(&self.cache_hit_probability) {
            return Err(contract("cacheHitProbability must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn nerf_adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr_start, self.lr_end, self.nerf_steps)
    }

    pub fn sem_adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr_start, self.lr_end, self.sem_steps)
    }

    /// Side of the images fed to the teacher.
    pub fn image_resolution(&self) -> u32 {
        self.feature_resolution * 4
    }
}
