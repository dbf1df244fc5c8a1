//! Post-training pipeline for small conditional flow-matching generators.

pub mod ardistill;
pub mod error;
pub mod flowsde;
pub mod gaussian;
pub mod grpoflow;
pub mod genmodel;
pub mod nn;
pub mod pipeline;
pub mod promptenh;
pub mod rewards;

pub use error::{Error, Result};
