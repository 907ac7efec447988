//! Knowledge-graph grounded prompting for multiple-choice question answering
//! with a black-box LLM.
//!
//! Evidence comes from either a heuristic two-hop subgraph or a learned path
//! policy, is rendered with one of three templates, and a contextual bandit
//! picks the extractor/template pair per question from answer feedback.

pub mod bandit;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod kg;
pub mod llm;
pub mod prompt;
pub mod rl;
pub mod subgraph;
pub mod synth;

pub use error::{Error, Result};
