//! Compression-order laboratory.
//!
//! Small layered linear models with relu, compression operators (pruning,
//! quantization, rotation, weight tying), the order-sensitivity metrics
//! built on top of them, exact oracles for the two ordering theorems, an
//! order planner, and a config-driven experiment harness.

pub mod compressors;
pub mod harness;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod report;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
