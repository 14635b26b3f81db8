//! Structured pruning of contrastive sentence encoders by alignment and
//! uniformity importance scores, with lottery-ticket style rewinding.
//!
//! The pipeline: masked-token pretraining (which also snapshots the rewind
//! target), contrastive training with dropout positives, importance scoring
//! of every attention head and FFN neuron, sparsity-constrained pruning,
//! then rewind-and-retrain of the surviving units.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod pruner;
pub mod scoring;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
