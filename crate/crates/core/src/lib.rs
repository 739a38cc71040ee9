//! Structure-to-text training data generation for event extraction (EE)
//! and relation extraction (RE).
//!
//! The pipeline inverts the extraction task: a target structure is sampled
//! from candidate pools first, an LLM is prompted to write a passage that
//! expresses it, and the passage is then audited and revised in a
//! self-reflection loop until it is clean or the budget runs out.

pub mod backend;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod ontology;
pub mod pipeline;
pub mod pools;
pub mod prompt;
pub mod refine;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
