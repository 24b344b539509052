//! OpenAI-compatible `/chat/completions` and `/embeddings` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use ureq::Agent;

use super::{
    embedding_from_values, ChatRequest, ChatResult, EmbedResult, GatewayError, ModelProvider,
    Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            timeout_secs: 120,
        }
    }

    /// Reads the credential from the environment variable `credential_env`.
    pub fn from_env(base_url: impl Into<String>, credential_env: &str) -> Result<Self, GatewayError> {
        let key = std::env::var(credential_env)
            .map_err(|_| GatewayError::MissingCredential(credential_env.to_string()))?;
        Ok(Self::new(base_url, Some(key)))
    }
}

pub struct OpenAiProvider {
    base_url: String,
    api_key: Option<String>,
    agent: Agent,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl OpenAiProvider {
    pub fn new(config: OpenAiConfig) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key: config.api_key,
            agent,
        }
    }

    fn post(&self, path: &str, body: serde_json::Value) -> Result<String, GatewayError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(GatewayError::AuthRejected { status }),
            429 => Err(GatewayError::RateLimited),
            _ => Err(GatewayError::Server { status, body: text }),
        }
    }
}

fn malformed(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::MalformedResponse(e.to_string())
}

impl ModelProvider for OpenAiProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError> {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(max) = request.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        let raw = self.post("chat/completions", body)?;
        let parsed: ChatResponse = serde_json::from_str(&raw).map_err(malformed)?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| malformed("response has no choices"))?
            .message
            .content
            .unwrap_or_default();
        let usage = match parsed.usage {
            Some(WireUsage {
                prompt_tokens: Some(p),
                completion_tokens: Some(c),
            }) => Usage::new(p, c),
            _ => Usage::estimate(&request.prompt_text(), &text),
        };
        Ok(ChatResult { text, usage })
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbedResult, GatewayError> {
        let raw = self.post("embeddings", json!({ "model": model, "input": texts }))?;
        let mut parsed: EmbeddingResponse = serde_json::from_str(&raw).map_err(malformed)?;
        if parsed.data.len() != texts.len() {
            return Err(malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        let vectors = parsed
            .data
            .into_iter()
            .map(|d| embedding_from_values(d.embedding))
            .collect::<Result<Vec<_>, _>>()?;
        let prompt_tokens = parsed
            .usage
            .and_then(|u| u.prompt_tokens)
            .unwrap_or_else(|| texts.iter().map(|t| super::estimate_tokens(t)).sum());
        Ok(EmbedResult {
            vectors,
            usage: Usage::new(prompt_tokens, 0),
        })
    }
}
