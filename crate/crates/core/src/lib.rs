//! Grid radiance fields with imitated semantic features.

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod image;
pub mod math;
pub mod mesh;
pub mod mlp;
pub mod optim;
pub mod radiance;
pub mod rle;
pub mod scene;
pub mod semantic;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
