//! Block-parallel 2D Gaussian splatting trainer.
//!
//! A flatland splatting stack: a tape-based autodiff core, a differentiable
//! rasterizer, an anchor + MLP-decoder scene representation, image metrics,
//! and a block-scheduled training engine with a momentum-averaged teacher
//! decoder and reconstruction-guided block weighting.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod geom;
pub mod imageio;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod train;
pub mod verify;
pub mod weighting;

pub use error::{Error, Result};
