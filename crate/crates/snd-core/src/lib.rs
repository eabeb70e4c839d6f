//! snd-core: feature splatting and student-teacher self-distillation on
//! procedurally generated multi-view scenes.
//!
//! The pipeline, per training step: encode two context views with the
//! teacher, upscale the low-resolution feature maps with mask-aware
//! interpolation, lift them onto 3D Gaussians built from ground-truth depth,
//! splat the feature scene to a target viewpoint, regularize with semantic
//! blending, and distill the rendered map into the student encoder. The
//! teacher follows the student by exponential moving average.

pub mod blend;
pub mod config;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lifting;
pub mod metrics;
pub mod rasterize;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};
