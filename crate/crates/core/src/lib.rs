//! Coreset-focused, diversity-oriented paraphrase augmentation for labeled
//! text datasets.
//!
//! The pipeline scores samples from external training dynamics, splits them
//! into augment/retain/prune tiers, paraphrases the augment tier through an
//! LLM endpoint keeping the candidates farthest from their source in
//! embedding space, and reports embedding-space and lexical diversity.

pub mod corpus;
pub mod embedding;
pub mod error;
mod http;
pub mod jsonl;
pub mod metrics;
pub mod coreset;
pub mod trainmath;
pub mod augment;
pub mod pipeline;

pub use error::{Error, ErrorClass, Result};
