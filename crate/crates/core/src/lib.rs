//! Knowledge tagging with an LLM judge and a learned demonstration retriever.

pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod episode;
pub mod eval;
pub mod judge;
pub mod par;
pub mod pipeline;
pub mod planted;
pub mod policy;
pub mod prompt;
pub mod seeds;
pub mod tagging;
pub mod trainer;

pub use error::{Error, Result};
