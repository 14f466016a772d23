//! Two-phase alignment of a small causal language model: instruction-tuning
//! on teacher chain-of-thought demonstrations, then self-refinement with
//! Direct Preference Optimization over the student's own samples.

pub mod answer;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod instruct;
pub mod pipeline;
pub mod policy;
pub mod refine;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
