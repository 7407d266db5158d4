//! Cross-camera pseudo-label refinement on a synthetic multi-camera scene.

// `!(x >= 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod bbox;
pub mod config;
pub mod evalmetrics;
pub mod geometry;
pub mod io;
pub mod labels;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod tracker;
pub mod trainer;
