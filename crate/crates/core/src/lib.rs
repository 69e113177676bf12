//! Recommendation with LLM-generated reasoning: corpus ingestion, splitting,
//! prompt rendering, artifact generation, fine-tuning export and evaluation.

pub mod cli;
pub mod context;
pub mod corpus;
pub mod export;
pub mod fsutil;
pub mod gateway;
pub mod generation;
pub mod harness;
pub mod metrics;
pub mod prompting;
pub mod sampler;
pub mod splitter;
pub mod synthetic;
