//! Desk-scale latent-diffusion laboratory built around a latent temporal
//! discrepancy (LTD) motion prior.
//!
//! The crate generates synthetic video corpora, maps them into a latent
//! space with a deterministic pseudo-encoder, computes per-voxel temporal
//! discrepancy maps, and trains a small noise-prediction network under
//! either the plain diffusion MSE objective or its LTD-weighted variant.
//! A DDIM sampler with classifier-free guidance and an experiment harness
//! (paired-seed baseline/LTD runs, per-frame diagnostics, heatmap export)
//! sit on top.
//!
//! Everything is deterministic: one master seed drives counter-based RNG
//! streams, and reruns reproduce all tensors, logs, and files byte for
//! byte. The `parallel` feature (on by default) runs the data-parallel
//! inner loops on rayon; disabling it falls back to sequential loops with
//! bit-identical results.

// Indexed loops over multiple aligned buffers read better than zips in
// the gradient and pooling kernels.
#![allow(clippy::needless_range_loop)]

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod io;
pub mod ltd;
pub(crate) mod parallel;
pub mod pgm;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{LatentVideo, PixelVideo, Tensor};
