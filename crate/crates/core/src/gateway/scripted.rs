//! Deterministic stand-in provider for offline runs and tests.
//!
//! Chat replies come from an ordered queue, with an optional matcher table
//! consulted first (first matcher whose needle occurs in the prompt wins;
//! matchers are never consumed). Embeddings come from an exact text map,
//! falling back to a feature-hashing embedder when one is configured.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    embedding_from_values, estimate_tokens, ChatRequest, ChatResult, EmbedResult, GatewayError,
    ModelProvider, Usage,
};

/// One canned chat reply. Deserializes from a bare string or an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ReplyRepr")]
pub struct ScriptedReply {
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplyRepr {
    Text(String),
    Full {
        reply: String,
        #[serde(default)]
        usage: Option<Usage>,
    },
}

impl From<ReplyRepr> for ScriptedReply {
    fn from(r: ReplyRepr) -> Self {
        match r {
            ReplyRepr::Text(reply) => Self { reply, usage: None },
            ReplyRepr::Full { reply, usage } => Self { reply, usage },
        }
    }
}

impl ScriptedReply {
    pub fn text(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
            usage: None,
        }
    }

    pub fn with_usage(mut self, usage: Usage) -> Self {
        self.usage = Some(usage);
        self
    }
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        Self::text(s)
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        Self::text(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matcher {
    pub contains: String,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

/// On-disk form of a script (`script.json` inside a fixture directory).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFixture {
    #[serde(default)]
    pub chat: Vec<ScriptedReply>,
    #[serde(default)]
    pub matchers: Vec<Matcher>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f64>>,
    /// Dimension of the hashed fallback embedder; none means unmapped texts
    /// are an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_embedding_dim: Option<usize>,
}

impl ScriptFixture {
    pub const FILE_NAME: &'static str = "script.json";

    /// Loads `script.json` from `path`, or `path` itself if it is a file.
    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let raw = std::fs::read_to_string(&file)?;
        serde_json::from_str(&raw).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {e}", file.display()),
            )
        })
    }
}

/// Bag-of-words feature hashing into a fixed number of signed buckets.
/// Texts sharing words land close together, which is enough to exercise
/// threshold gating without a real embedding model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut bump = |token: &str| {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            bump(token);
            any = true;
        }
        if !any {
            bump(&lower);
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    queue: VecDeque<ScriptedReply>,
    log: Vec<ChatRequest>,
    embed_calls: usize,
}

#[derive(Debug)]
pub struct ScriptedProvider {
    matchers: Vec<Matcher>,
    embeddings: BTreeMap<String, Vec<f64>>,
    fallback: Option<HashEmbedder>,
    ordered: bool,
    state: Mutex<ScriptState>,
}

impl ScriptedProvider {
    pub fn new(replies: impl IntoIterator<Item = impl Into<ScriptedReply>>) -> Self {
        Self::from_fixture(ScriptFixture {
            chat: replies.into_iter().map(Into::into).collect(),
            ..Default::default()
        })
    }

    pub fn from_fixture(fixture: ScriptFixture) -> Self {
        let ordered = !fixture.chat.is_empty();
        Self {
            matchers: fixture.matchers,
            embeddings: fixture.embeddings,
            fallback: fixture.hash_embedding_dim.map(HashEmbedder::new),
            ordered,
            state: Mutex::new(ScriptState {
                queue: fixture.chat.into(),
                ..Default::default()
            }),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, std::io::Error> {
        ScriptFixture::load(path).map(Self::from_fixture)
    }

    pub fn with_matcher(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.matchers.push(Matcher {
            contains: contains.into(),
            reply: reply.into(),
            usage: None,
        });
        self
    }

    pub fn with_embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }

    pub fn with_hash_fallback(mut self, dim: usize) -> Self {
        self.fallback = Some(HashEmbedder::new(dim));
        self
    }

    pub fn push_reply(&self, reply: impl Into<ScriptedReply>) {
        self.lock().queue.push_back(reply.into());
    }

    pub fn remaining(&self) -> usize {
        self.lock().queue.len()
    }

    /// Every chat request received so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.lock().log.clone()
    }

    pub fn chat_calls(&self) -> usize {
        self.lock().log.len()
    }

    pub fn embed_calls(&self) -> usize {
        self.lock().embed_calls
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ScriptState> {
        self.state.lock().expect("script lock poisoned")
    }

    fn vector_for(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if let Some(v) = self.embeddings.get(text) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(h) => Ok(h.embed(text)),
            None => Err(GatewayError::UnknownEmbeddingText(text.to_string())),
        }
    }
}

impl ModelProvider for ScriptedProvider {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResult, GatewayError> {
        request.validate()?;
        let prompt = request.prompt_text();
        let mut state = self.lock();
        state.log.push(request.clone());
        let (reply, usage) = match self.matchers.iter().find(|m| prompt.contains(&m.contains)) {
            Some(m) => (m.reply.clone(), m.usage),
            None => {
                let next = state.queue.pop_front().ok_or(GatewayError::ScriptExhausted)?;
                (next.reply, next.usage)
            }
        };
        let usage = usage.unwrap_or_else(|| Usage::estimate(&prompt, &reply));
        Ok(ChatResult { text: reply, usage })
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<EmbedResult, GatewayError> {
        self.lock().embed_calls += 1;
        let vectors = texts
            .iter()
            .map(|t| self.vector_for(t).and_then(embedding_from_values))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmbedResult {
            vectors,
            usage: Usage::new(texts.iter().map(|t| estimate_tokens(t)).sum(), 0),
        })
    }

    fn parallel_safe(&self) -> bool {
        !self.ordered
    }
}
