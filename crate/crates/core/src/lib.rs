//! Multi-level knowledge distillation for zero-shot human-object interaction
//! detection, at desk scale.

pub mod branches;
pub mod distill;
pub mod encoder;
mod error;
pub mod evaluator;
pub mod geometry;
pub mod infer;
pub mod labels;
pub mod pipeline;
pub mod seeds;
pub mod synthworld;
pub mod tensorcore;

pub use error::{Error, Result};
