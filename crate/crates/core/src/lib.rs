//! Adaptive-margin triplet training for two-tower cross-modal retrieval.
//!
//! Supervision experts measure within-modality distances between items in a
//! batch; the rescale function turns those into per-pair margins that enter
//! a self-distillation objective alongside the usual hard-margin triplet
//! loss.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experts;
pub mod formats;
pub mod margin;
pub mod math;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
