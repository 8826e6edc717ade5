//! Retrieval-augmented reasoning toolkit.
//!
//! Dense retrieval over a summarised document corpus, a gateway to
//! OpenAI-compatible reasoning endpoints with budget forcing, the synthetic
//! query and reasoning-trace dataset pipelines, a conversational orchestrator,
//! and the evaluation harness for retrieval and answer accuracy.

pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod orchestrator;
pub mod parallel;
pub mod prompts;
pub mod retrieval;
pub mod synth;
pub mod template;
pub mod tokenizer;
pub mod traces;

pub use parallel::Execution;
