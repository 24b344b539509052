//! Model access: chat completions, embeddings, retry, and cost accounting.
//!
//! Everything that can reach the network lives under this module. The rest of
//! the engine talks to a [`Gateway`], which wraps any [`ModelProvider`] with
//! request validation, bounded in-flight calls, transient-failure retries and
//! a shared [`CostLedger`].

mod ledger;
mod openai;
mod scripted;

pub use ledger::{CostLedger, LedgerError, ModelPrice, ModelTotals};
pub use openai::{OpenAiConfig, OpenAiProvider};
pub use scripted::{HashEmbedder, Matcher, ScriptFixture, ScriptedProvider, ScriptedReply};

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::index::{Embedding, IndexError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("credential rejected (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("rate limited")]
    RateLimited,
    #[error("server error (HTTP {status}): {body}")]
    Server { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding batch has inconsistent dimensions")]
    DimensionMismatch,
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("scripted provider has no reply left")]
    ScriptExhausted,
    #[error("cannot load script fixture: {0}")]
    Fixture(String),
    #[error("scripted provider has no embedding for {0:?}")]
    UnknownEmbeddingText(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl GatewayError {
    /// Failures worth another attempt after backing off.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::RateLimited => true,
            GatewayError::Server { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "chat request has no messages".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("model id is empty".into()));
        }
        Ok(())
    }

    /// Concatenated message contents, used for matching and token estimates.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    /// Rough count for endpoints that omit usage: one token per four chars.
    pub fn estimate(prompt: &str, completion: &str) -> Self {
        Self {
            prompt_tokens: estimate_tokens(prompt),
            completion_tokens: estimate_tokens(completion),
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResult {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedResult {
    pub vectors: Vec<Embedding>,
    pub usage: Usage,
}

/// A chat-completion and embedding backend.
pub trait ModelProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError>;

    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbedResult, GatewayError>;

    /// Whether replies are independent of call interleaving. Providers that
    /// replay an ordered script must be driven sequentially.
    fn parallel_safe(&self) -> bool {
        true
    }
}

impl<P: ModelProvider + ?Sized> ModelProvider for Arc<P> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError> {
        (**self).chat(request)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<EmbedResult, GatewayError> {
        (**self).embed(model, texts)
    }

    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            factor: 1.0,
        }
    }

    /// Upper bound of the sleep before retry number `retry` (0-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(retry as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let ceiling = self.ceiling(retry).as_millis() as u64;
        if ceiling == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(0..=ceiling))
    }

    /// Runs `op`, retrying transient failures.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut retry = 0;
        loop {
            match op() {
                Err(err) if err.is_transient() && retry < self.max_retries => {
                    let delay = self.jittered(retry);
                    warn!(%err, retry, ?delay, "transient model failure, backing off");
                    std::thread::sleep(delay);
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding concurrent provider calls.
#[derive(Debug)]
struct InflightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InflightLimiter);

impl InflightLimiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("inflight lock poisoned");
        while *active >= self.max {
            active = self.freed.wait(active).expect("inflight lock poisoned");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().expect("inflight lock poisoned");
        *active -= 1;
        self.0.freed.notify_one();
    }
}

/// The engine's single entry point to models.
pub struct Gateway {
    provider: Arc<dyn ModelProvider>,
    chat_model: String,
    embedding_model: String,
    retry: RetryPolicy,
    inflight: InflightLimiter,
    ledger: Mutex<CostLedger>,
}

impl Gateway {
    pub fn new(
        provider: Arc<dyn ModelProvider>,
        chat_model: impl Into<String>,
        embedding_model: impl Into<String>,
    ) -> Self {
        Self {
            provider,
            chat_model: chat_model.into(),
            embedding_model: embedding_model.into(),
            retry: RetryPolicy::default(),
            inflight: InflightLimiter::new(4),
            ledger: Mutex::new(CostLedger::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_inflight(mut self, max: usize) -> Self {
        self.inflight = InflightLimiter::new(max);
        self
    }

    pub fn with_ledger(self, ledger: CostLedger) -> Self {
        *self.ledger.lock().expect("ledger lock poisoned") = ledger;
        self
    }

    pub fn chat_model(&self) -> &str {
        &self.chat_model
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    pub fn max_inflight(&self) -> usize {
        self.inflight.max
    }

    pub fn parallel_safe(&self) -> bool {
        self.provider.parallel_safe()
    }

    /// Snapshot of the accumulated costs.
    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().expect("ledger lock poisoned").clone()
    }

    /// Sends `messages` to the chat model.
    pub fn chat(&self, messages: Vec<Message>, temperature: f64) -> Result<ChatResult, GatewayError> {
        self.chat_request(&ChatRequest {
            model: self.chat_model.clone(),
            messages,
            temperature,
            max_output_tokens: None,
        })
    }

    pub fn chat_request(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError> {
        request.validate()?;
        self.ledger
            .lock()
            .expect("ledger lock poisoned")
            .check_priced(&request.model)?;
        let result = {
            let _permit = self.inflight.acquire();
            self.retry.run(|| self.provider.chat(request))?
        };
        debug!(
            model = %request.model,
            prompt_tokens = result.usage.prompt_tokens,
            completion_tokens = result.usage.completion_tokens,
            "chat completed"
        );
        self.ledger
            .lock()
            .expect("ledger lock poisoned")
            .record(&request.model, result.usage)?;
        Ok(result)
    }

    /// Embeds `texts` with the embedding model, preserving order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("nothing to embed".into()));
        }
        if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!(
                "text {pos} to embed is empty"
            )));
        }
        self.ledger
            .lock()
            .expect("ledger lock poisoned")
            .check_priced(&self.embedding_model)?;
        let result = {
            let _permit = self.inflight.acquire();
            self.retry
                .run(|| self.provider.embed(&self.embedding_model, texts))?
        };
        if result.vectors.len() != texts.len() {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                result.vectors.len()
            )));
        }
        let dim = result.vectors[0].dim();
        if result.vectors.iter().any(|v| v.dim() != dim) {
            return Err(GatewayError::DimensionMismatch);
        }
        self.ledger
            .lock()
            .expect("ledger lock poisoned")
            .record(&self.embedding_model, result.usage)?;
        Ok(result.vectors)
    }

    pub fn embed_one(&self, text: &str) -> Result<Embedding, GatewayError> {
        let mut v = self.embed(&[text.to_string()])?;
        Ok(v.remove(0))
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("chat_model", &self.chat_model)
            .field("embedding_model", &self.embedding_model)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

pub(crate) fn embedding_from_values(values: Vec<f64>) -> Result<Embedding, GatewayError> {
    Embedding::new(values).map_err(|e: IndexError| GatewayError::MalformedResponse(e.to_string()))
}
