//! LogitNorm OOD-detection workbench: a small autodiff MLP stack, training
//! losses, post-hoc OOD scores, detection and calibration metrics, and an
//! experiment harness over synthetic data.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scores;
pub mod tensor;

pub use error::{Error, Result};
