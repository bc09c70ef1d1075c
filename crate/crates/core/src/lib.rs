//! Cubemap panorama diffusion at desk scale.
//!
//! Geometry and resampling between equirectangular panoramas and cubemaps,
//! a small multi-view denoiser with inflated attention and synchronized
//! group norm, a v-prediction DDIM sampler, synthetic training data,
//! checkpoints, and seam/colour/KID metrics.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generate;
pub mod geometry;
pub mod image;
pub mod io;
pub mod latent;
pub mod net;
pub mod projection;
pub mod rng;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Direction, FaceId};
pub use image::{Image, Wrap};
pub use projection::{CubemapImage, EquirectImage};
