use thiserror::Error;

use crate::gateway::GatewayError;
use crate::index::IndexError;
use crate::memory::MemoryError;
use crate::prompts::CodecError;

/// Failures of the retrieval, reflection and update stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("vector index: {0}")]
    Index(#[from] IndexError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("prompt: {0}")]
    Codec(#[from] CodecError),
}
