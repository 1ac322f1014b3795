//! Multimodal neural processes with dynamic context memory, Bayesian
//! multimodal aggregation and adaptive RBF attention.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;

pub use error::{MnpError, Result};
pub use mnp_tensor as tensor;
