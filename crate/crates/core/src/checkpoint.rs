//! "SANF" checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"SANF"
//! u32    version
//! u32    entry count
//! entry* u32 name length, UTF-8 name,
//!        u8 dtype (0 = f32, 1 = u8), u8 rank, u64 dims[rank],
//!        payload (product of dims elements)
//! ```
//!
//! JSON metadata (bounds, teacher spec, training settings) travels as rank-1
//! `u8` entries.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::math::Aabb;
use crate::mlp::{Activation, Layer, Mlp};
use crate::optim::AdamConfig;
use crate::radiance::RadianceField;
use crate::scene::SceneFile;
use crate::semantic::{FeatureDims, SemanticField};
use crate::teacher::TeacherSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SANF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

/// Ordered named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Entry)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Container {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), Entry::Tensor(t)));
    }

    pub fn push_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        self.entries
            .push((name.into(), Entry::Bytes(serde_json::to_vec(value)?)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Entry::Tensor(t)) => Ok(t),
            Some(Entry::Bytes(_)) => Err(bad(format!("'{name}' is not a tensor"))),
            None => Err(bad(format!("missing tensor '{name}'"))),
        }
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Option<T>> {
        match self.get(name) {
            Some(Entry::Bytes(b)) => Ok(Some(serde_json::from_slice(b)?)),
            Some(Entry::Tensor(_)) => Err(bad(format!("'{name}' is not a JSON blob"))),
            None => Ok(None),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match entry {
                Entry::Tensor(t) => {
                    w.write_all(&[0, t.shape().len() as u8])?;
                    for &d in t.shape() {
                        w.write_all(&(d as u64).to_le_bytes())?;
                    }
                    let mut buf = Vec::with_capacity(t.len() * 4);
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
                Entry::Bytes(b) => {
                    w.write_all(&[1, 1])?;
                    w.write_all(&(b.len() as u64).to_le_bytes())?;
                    w.write_all(b)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a SANF checkpoint"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut out = Self::default();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            let [dtype, rank] = head;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("dimension overflow"))?);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("'{name}' is too large")))?;
            let entry = match dtype {
                0 => {
                    let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| bad("payload overflow"))?];
                    r.read_exact(&mut buf)?;
                    let data = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Entry::Tensor(Tensor::new(dims, data)?)
                }
                1 if rank == 1 => {
                    let mut buf = vec![0u8; n];
                    r.read_exact(&mut buf)?;
                    Entry::Bytes(buf)
                }
                _ => return Err(bad(format!("'{name}': dtype {dtype} with rank {rank}"))),
            };
            out.entries.push((name, entry));
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Settings needed to rebuild the models around the stored tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelMeta {
    pub bounds: Aabb,
    pub samples_per_ray: usize,
    #[serde(default)]
    pub feature_dims: Vec<FeatureDims>,
}

/// A trained radiance field with its optional semantic field and teacher,
/// and the scene it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub radiance: RadianceField,
    pub semantic: Option<SemanticField>,
    pub teacher: Option<TeacherSpec>,
    pub config: Option<TrainConfig>,
    pub scene: Option<SceneFile>,
}

impl Checkpoint {
    pub fn new(radiance: RadianceField) -> Self {
        Self {
            radiance,
            semantic: None,
            teacher: None,
            config: None,
            scene: None,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        let meta = ModelMeta {
            bounds: self.radiance.bounds(),
            samples_per_ray: self.radiance.samples_per_ray,
            feature_dims: self
                .semantic
                .as_ref()
                .map(|s| s.feature_dims.clone())
                .unwrap_or_default(),
        };
        c.push_json("model.meta", &meta)?;
        if let Some(cfg) = &self.config {
            c.push_json("train.config", cfg)?;
            let adam: [AdamConfig; 2] = [cfg.nerf_adam(), cfg.sem_adam()];
            c.push_json("train.adam", &adam)?;
        }
        if let Some(t) = &self.teacher {
            c.push_json("teacher.spec", t)?;
        }
        if let Some(scene) = &self.scene {
            c.push_json("scene.file", scene)?;
        }
        for (name, t) in self.radiance.param_names().into_iter().zip(self.radiance.params()) {
            c.push_tensor(name, t.clone());
        }
        if let Some(sem) = &self.semantic {
            for (name, t) in sem.param_names().into_iter().zip(sem.params()) {
                c.push_tensor(name, t.clone());
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ModelMeta = c.json("model.meta")?.ok_or_else(|| bad("missing 'model.meta'"))?;
        let geo_grid = grid_from(c.tensor("geo.grid")?, meta.bounds)?;
        let rgb_grid = grid_from(c.tensor("rgb.grid")?, meta.bounds)?;
        let radiance = RadianceField::from_parts(
            geo_grid,
            rgb_grid,
            mlp_from(c, "geo.head")?,
            mlp_from(c, "rgb.head")?,
            meta.samples_per_ray,
        )?;
        let semantic = if c.get("sem.grid").is_some() {
            let grid = grid_from(c.tensor("sem.grid")?, meta.bounds)?;
            let heads = (0..meta.feature_dims.len())
                .map(|i| mlp_from(c, &format!("sem.head{i}")))
                .collect::<Result<Vec<_>>>()?;
            Some(SemanticField::from_parts(grid, heads, meta.feature_dims)?)
        } else {
            None
        };
        Ok(Self {
            radiance,
            semantic,
            teacher: c.json("teacher.spec")?,
            config: c.json("train.config")?,
            scene: c.json("scene.file")?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.to_container()?.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::read_from(&mut &bytes[..])?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn grid_from(t: &Tensor, bounds: Aabb) -> Result<FeatureGrid> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(bad(format!("grid tensor of shape {s:?}")));
    }
    FeatureGrid::from_values([s[0], s[1], s[2]], bounds, t.clone())
}

/// Rebuilds `{prefix}.layer{k}.w|b` with ReLU on every layer but the last.
fn mlp_from(c: &Container, prefix: &str) -> Result<Mlp> {
    let mut layers = Vec::new();
    while c.get(&format!("{prefix}.layer{}.w", layers.len())).is_some() {
        let k = layers.len();
        layers.push(Layer {
            weight: c.tensor(&format!("{prefix}.layer{k}.w"))?.clone(),
            bias: c.tensor(&format!("{prefix}.layer{k}.b"))?.clone(),
            activation: Activation::Relu,
        });
    }
    match layers.last_mut() {
        Some(l) => l.activation = Activation::None,
        None => return Err(bad(format!("no layers under '{prefix}'"))),
    }
    Mlp::from_layers(layers)
}
