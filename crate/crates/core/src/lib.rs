//! Low-light image enhancement built on a Retinex decomposition.
//!
//! The pipeline splits an image into illumination and reflectance, refines
//! the reflectance with a small convolutional network that attends to
//! semantic segmentation features, brightens the illumination with a learned
//! power curve, and recomposes the result. Training combines pixel, edge,
//! semantic-consistency, and text-embedding objectives.

pub mod ablation;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod enhancer;
pub mod error;
pub mod imaging;
pub mod loss;
pub mod params;
pub mod retinex;
pub mod segmentation;
pub mod train;
pub mod vision_language;

pub use error::{Error, Result};
