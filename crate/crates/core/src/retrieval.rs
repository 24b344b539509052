//! Stage I: top-k template recall plus the full error-pattern list.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::config::EngineParams;
use crate::error::EngineError;
use crate::gateway::Gateway;
use crate::index::Embedding;
use crate::memory::{ErrorPattern, Template};
use crate::store::Memory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn theta_corr(self, params: &EngineParams) -> f64 {
        match self {
            Mode::Train => params.theta_corr_train,
            Mode::Infer => params.theta_corr_infer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Best first; every score clears the active threshold.
    pub templates: Vec<(Template, f64)>,
    /// The whole EPM in insertion order.
    pub error_patterns: Vec<ErrorPattern>,
    pub query_embedding: Embedding,
}

impl RetrievalResult {
    pub fn template_ids(&self) -> Vec<String> {
        self.templates.iter().map(|(t, _)| t.id.clone()).collect()
    }
}

/// Recalls with an already computed query embedding.
pub fn retrieve_with_embedding(
    query_embedding: Embedding,
    memory: &Memory,
    k: usize,
    theta_corr: f64,
) -> Result<RetrievalResult, EngineError> {
    let hits = if memory.template_index().is_empty() {
        Vec::new()
    } else {
        memory
            .template_index()
            .top_k(&query_embedding, k, theta_corr)?
    };
    let templates = hits
        .into_iter()
        .map(|h| {
            let t = memory
                .state
                .template(&h.id)
                .expect("indexed template exists")
                .clone();
            (t, h.score)
        })
        .collect();
    Ok(RetrievalResult {
        templates,
        error_patterns: memory.state.epm.clone(),
        query_embedding,
    })
}

/// Embeds `query` once and recalls against `memory` without mutating it.
pub fn retrieve(
    query: &str,
    memory: &Memory,
    gateway: &Gateway,
    params: &EngineParams,
    mode: Mode,
) -> Result<RetrievalResult, EngineError> {
    if let Some(cap) = params.epm_soft_cap {
        if memory.state.epm.len() > cap {
            warn!(size = memory.state.epm.len(), cap, "error-pattern memory above soft cap");
        }
    }
    let e_q = gateway.embed_one(query)?;
    retrieve_with_embedding(e_q, memory, params.k, mode.theta_corr(params))
}
