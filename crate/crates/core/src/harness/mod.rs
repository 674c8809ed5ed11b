//! Synthetic segmentation experiments: data, training, metrics, stress
//! protocol and rendering.

pub mod dataset;
pub mod metrics;
pub mod train;
pub mod render;
pub mod stress;
