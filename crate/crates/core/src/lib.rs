//! Distractor-robust semi-supervised video object segmentation kernels.
//!
//! The crate is organised around the matching pipeline:
//!
//! - [`grid`]: dense feature grids, probability masks, label masks and score stacks.
//! - [`templates`]: the five matching templates (global/local fine, overall/short/long coarse).
//! - [`matching`]: diversified similarity matching and learnable spatial distance scoring.
//! - [`augment`]: swap-and-attach video augmentation.
//! - [`tracker`]: toy embedder, affine readout and per-sequence inference.
//! - [`learn`]: loss, exact gradients through the unrolled tracker, Adam, training loop.
//! - [`evalio`]: J/F/G metrics, PNM/PNG sequence IO and a synthetic distractor scene generator.
//!
//! Inference runs in `f32`; every numeric type is generic over [`Real`] so that the
//! same code runs in `f64` for gradient verification and training.

pub mod augment;
pub mod error;
pub mod evalio;
pub mod grid;
pub mod learn;
pub mod matching;
pub mod real;
pub mod templates;
pub mod tracker;

pub use error::{Error, Result};
pub use real::Real;
