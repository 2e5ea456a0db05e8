//! Hierarchical 3D block-aggregation transformer (UNesT) for volumetric
//! segmentation, built on a small reverse-mode autodiff engine.

pub mod blockops;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
