//! Core engine for a hybrid sequence model that interleaves serial token
//! prediction with parallel block denoising in one transformer.
//!
//! Modules build bottom-up: [`numerics`] provides tensors and reverse-mode
//! autodiff, [`layout`] compiles segment descriptions into attention masks
//! and shared positions, [`model`] implements the two-expert transformer,
//! [`flow`] the rectified-flow objective and sampler, [`worldgen`] the
//! procedural shape corpus, and [`trainer`] optimisation, checkpoints, and
//! the staged training loop.

pub mod error;
pub mod eval;
pub mod flow;
pub mod infer;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
