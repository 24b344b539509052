//! Shared context of the three pipeline stages.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::config::EngineParams;
use crate::error::EngineError;
use crate::gateway::{Gateway, Message, Usage};
use crate::prompts::{Bindings, CodecError, PromptKind, PromptLibrary};

/// Meta-operations (reflection, template and pattern upkeep) run greedy.
pub const META_TEMPERATURE: f64 = 0.0;

/// One model call made on behalf of an item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: PromptKind,
    pub prompt: String,
    pub reply: String,
    pub usage: Usage,
}

/// Borrowed handles every stage needs: the model gateway, the active prompt
/// texts and the tunables.
#[derive(Debug, Clone, Copy)]
pub struct Engine<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptLibrary,
    pub params: &'a EngineParams,
}

fn correction(err: &CodecError) -> String {
    format!(
        "Your previous reply could not be used ({err}). Respond again with only the JSON object in exactly the required format and nothing else."
    )
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptLibrary, params: &'a EngineParams) -> Self {
        Self {
            gateway,
            prompts,
            params,
        }
    }

    pub(crate) fn render(&self, kind: PromptKind, bindings: &Bindings) -> Result<String, EngineError> {
        Ok(self.prompts.render(kind, bindings)?)
    }

    /// Single user-turn call, logged to `transcript`.
    pub(crate) fn complete(
        &self,
        kind: PromptKind,
        prompt: String,
        temperature: f64,
        transcript: &mut Vec<TranscriptEntry>,
    ) -> Result<String, EngineError> {
        let result = self
            .gateway
            .chat(vec![Message::user(prompt.clone())], temperature)?;
        transcript.push(TranscriptEntry {
            kind,
            prompt,
            reply: result.text.clone(),
            usage: result.usage,
        });
        Ok(result.text)
    }

    /// Sends a structured meta-prompt and parses the reply, re-asking once
    /// with the parse error if the first reply is unusable.
    ///
    /// The outer error is a provider failure; the inner one means both
    /// replies were unusable. The last raw reply is returned either way.
    pub(crate) fn ask_structured<T>(
        &self,
        kind: PromptKind,
        prompt: String,
        parse: impl Fn(&str) -> Result<T, CodecError>,
        transcript: &mut Vec<TranscriptEntry>,
    ) -> Result<(Result<T, CodecError>, String), EngineError> {
        let first = self.complete(kind, prompt.clone(), META_TEMPERATURE, transcript)?;
        let err = match parse(&first) {
            Ok(v) => return Ok((Ok(v), first)),
            Err(e) => e,
        };
        warn!(?kind, error = %err, "unusable structured reply, re-asking once");
        let fix = correction(&err);
        let result = self.gateway.chat(
            vec![
                Message::user(prompt),
                Message::assistant(first),
                Message::user(fix.clone()),
            ],
            META_TEMPERATURE,
        )?;
        transcript.push(TranscriptEntry {
            kind,
            prompt: fix,
            reply: result.text.clone(),
            usage: result.usage,
        });
        let parsed = parse(&result.text);
        if let Err(e) = &parsed {
            warn!(?kind, error = %e, "structured reply still unusable after re-ask");
        }
        Ok((parsed, result.text))
    }
}
