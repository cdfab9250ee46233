//! Unified space-time video inpainting at desk scale.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod diffusion;
pub mod video;
pub mod maskgen;
pub mod synthdata;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod sampler;
