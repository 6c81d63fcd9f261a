//! Concept encoders (pooling, recalibration, activation), the linear
//! aggregator and concept heatmaps, plus the assembled multi-modal model.

mod network;
mod ops;

pub use network::*;
pub use ops::*;
