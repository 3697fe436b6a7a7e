//! Multi-modal knowledge graphs for entity-aware image captioning.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod captioner;
pub mod codec;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gat;
pub mod graph;
pub mod kb;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
