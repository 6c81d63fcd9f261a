//! Self-explaining multi-modal concept classifier.
//!
//! Each modality is encoded by a small backbone, pooled, and recalibrated
//! into a set of concept activations; a linear aggregator maps the
//! concatenated activations to class probabilities. The aggregator weights
//! double as concept relevance scores, which can be inspected, pruned, and
//! checked for faithfulness with an extended Most-Relevant-First curve.

pub mod backbones;
pub mod data;
pub mod error;
pub mod explain;
pub mod faithfulness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
