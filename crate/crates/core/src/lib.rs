//! Controllable, plugin-driven LLM user simulator for conversational
//! recommender systems, with the evaluation harness around it.

pub mod crs;
pub mod dataset;
pub mod domain;
pub mod harness;
pub mod llm;
pub mod pipeline;
pub mod plugins;
pub mod prompts;
pub mod text;
