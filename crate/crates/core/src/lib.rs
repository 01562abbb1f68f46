//! Self-supervised dual-domain low-dose CT denoising toolkit.
//!
//! The pipeline trains and evaluates entirely on synthetic ellipse phantoms
//! with a physically faithful fan-beam noise model:
//!
//! 1. projection-domain denoising trained on contextual sub-data pairs from
//!    a single low-dose sinogram ([`sampler`], [`projnet`]),
//! 2. latent-diffusion image refinement distilled against the
//!    projection-stage prior ([`diffusion`], [`refiner`]),
//! 3. pixel-level self-correcting fusion of the low-dose image and the
//!    prior, with a tunable dose-generalization shift ([`fusion`]),
//! 4. full-reference image quality metrics under a fixed HU window
//!    ([`metrics`]).
//!
//! The `ldct` binary exposes the stages as subcommands; see the crate
//! README for a walkthrough.


pub mod config;
pub mod io;
pub mod pipeline;
pub mod diffusion;
pub mod fusion;
pub mod dose;
pub mod error;

pub mod geometry;
pub mod metrics;


pub mod nn;
pub mod phantom;
pub mod projnet;
pub mod refiner;

pub mod projector;


pub mod rng;
pub(crate) mod util;
pub mod sampler;

pub use error::{LdctError, Result};
