pub mod artifacts;
pub mod attention;
pub mod block;
pub mod config;
pub mod container;
pub mod error;
pub mod gauge_bias;
pub mod geometry;
pub mod harness;
pub mod icosphere;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod so3;
pub mod transfer;

pub use error::{Error, Result};
