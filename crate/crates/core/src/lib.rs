//! Action-prompted dual-encoder image-text matching.
//!
//! The crate builds a miniature CLIP-style dual encoder, derives action
//! knowledge (subject–action–object triplets and state descriptions) from
//! captions through an LLM backend, injects that knowledge as prompts via an
//! adaptive cross-attention interaction module, trains in two freeze-scheduled
//! stages, and evaluates retrieval with top-k re-ranking.

pub mod checkpoint;
pub mod clip;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod knowledge;
pub mod nn;
pub mod params;
pub mod prompts;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
