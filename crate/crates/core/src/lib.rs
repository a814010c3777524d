//! Measurement-constrained posterior sampling with diffusion priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] and [`rng`] hold the raster container and the seeded generator.
//! * [`diffusion`] implements the noise schedule and the unguided DDPM math.
//! * [`linops`] and [`haar`] provide degradation operators, pseudo-inverses and
//!   the orthonormal Haar transform.
//! * [`gmm`] is an analytic Gaussian-mixture prior with an exact conditional
//!   denoiser and linear-Gaussian posterior oracles.
//! * [`degrade`] synthesizes low-quality observations (blur, pool, noise, JPEG).
//! * [`guidance`] contains the measurement losses, the MCS sampler and the
//!   DPS / DDNM baselines.
//! * [`harness`] and [`pgm`] drive experiments and handle file I/O.

pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod guidance;
pub mod haar;
pub mod harness;
pub mod linops;
pub mod pgm;
pub mod rng;

pub use error::{Error, Result};
pub use grid::ImageGrid;
