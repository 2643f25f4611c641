//! Optimal-transport output-space domain adaptation for semantic segmentation.

pub mod config;
pub mod data;
mod error;
pub mod jdot;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod train;

pub use error::{Error, Result};
