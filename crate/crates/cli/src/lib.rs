//! Interactive segmentation service over a trained checkpoint.

pub mod error;
pub mod server;
pub mod wire;

pub use error::ApiError;
pub use server::{router, Session, SessionOptions};
