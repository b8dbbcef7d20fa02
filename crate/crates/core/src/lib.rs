//! Autoregressive Gaussian-splat head avatars at desk scale.
//!
//! Point clouds bound to a rigged template are tokenised, generated by a
//! decoder-only transformer, lifted to full Gaussians by a second
//! transformer, animated through the rig and rendered by a CPU splatter.

pub mod ar;
mod binio;
pub mod cloud;
pub mod codec;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod nn;
mod parallel;
pub mod pipeline;
pub mod render;
pub mod rig;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Cloud = cloud::BoundPointCloud<f32>;
pub type Template = rig::RigTemplate<f64>;
