//! Multi-horizon entity metric estimation under concept drift.
//!
//! The crate bundles a synthetic data generator, a small dense/convolutional
//! network kernel with hand-written gradients, the shape/scale estimation
//! model and its ablations, matrix-profile based regime segmentation, training
//! candidate samplers, the online trainer with label delay, and a benchmark
//! harness.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod profile;
pub mod sampling;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
