//! Knowledge distillation for Vision Transformers with a saliency-masked
//! teacher.
//!
//! The student runs on the full image; its last-block class attention ranks
//! patches, and the teacher only sees the highest-ranked ones. This crate
//! holds the model, the masking logic, the training loop, an analytical cost
//! model and a pipeline-schedule simulator.

// `!(x > 0.0)` style checks are how NaN gets rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod interp;
pub mod masking;
pub mod pipeline;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
