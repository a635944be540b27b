//! Image-conditioned trajectory-grid generation.
//!
//! The library covers the full pipeline at desk scale:
//!
//! * [`grid`] / [`dataset`] — trajectory-grid domain types and the bit-exact
//!   on-disk dataset format
//! * [`sim`] — deterministic 2D rigid-body simulator and dataset factory
//! * [`tensor`] — f64 reverse-mode autodiff the models are built on
//! * [`nn`] — shared spatio-temporal transformer blocks (RMSNorm, QK-norm
//!   attention, gated cross-attention, adaptive modulation)
//! * [`imgenc`] — trainable image tokenizers behind a pluggable interface
//! * [`vae`] — the trajectory beta-VAE
//! * [`flow`] — rectified-flow training and Euler sampling
//! * [`metrics`] — Best-of-K, FVMD / FVMD(S), LRTL, scene sample variance,
//!   and the MSE aggregation family
//! * [`train`] — AdamW, schedules, checkpoints, and the training loops
//! * [`viz`] — track overlays rendered to PPM

pub mod dataset;
pub mod error;
pub mod flow;
pub mod grid;
pub mod imgenc;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod vae;
pub mod viz;

pub use error::{Error, Result};
