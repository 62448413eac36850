//! Learned probabilistic safety assessment for closed-loop trajectory
//! tracking systems.
//!
//! The pipeline rolls out a nominal closed-loop system, cuts the rollouts into
//! fixed-horizon segments scored by how close they sit to a failure, embeds
//! the segments into a plane with t-SNE over a dynamic-time-warping distance,
//! and assigns belief masses over {safe, unsafe} to the cells of a grid laid
//! over that plane. A regression network maps fresh inputs (current state plus
//! upcoming reference) into the plane so that any input can be assessed.
//! Online, rollouts of the real system feed a Gaussian-process discrepancy
//! model and per-cell feedback beliefs that pull the assessment toward the
//! behaviour of the deployed system.

pub mod adapt;
pub mod belief;
pub mod bundle;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod grid;
pub mod json;
pub mod metric;
pub mod pipeline;

pub use error::{Error, Result};
