//! Self-evolving dual-memory engine for automatic prompt optimization.
//!
//! Successful reasoning trajectories are distilled into strategy templates
//! (the correct-template memory), failed ones into generalized error rules
//! (the error-pattern memory). Each query retrieves from both to build a
//! memory-augmented prompt, and every training item feeds back into memory
//! through reflection-driven updates.

pub mod config;
pub mod engine;
mod error;
pub mod gateway;
pub mod harness;
pub mod index;
pub mod memory;
pub mod prompts;
pub mod reflection;
pub mod retrieval;
pub mod store;
pub mod update;

pub use config::{EngineParams, RunConfig};
pub use engine::Engine;
pub use error::EngineError;
pub use store::Memory;
