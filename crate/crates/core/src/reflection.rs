//! Stage II: augmented-prompt generation, grading, and the reflect-retry loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, TranscriptEntry};
use crate::error::EngineError;
use crate::prompts::{
    format_reflections, format_rules, format_templates_block, parse_reflect, Bindings,
    FailedAttempt, PromptKind, NONE_BLOCK,
};
use crate::retrieval::{retrieve, Mode, RetrievalResult};
use crate::store::Memory;

/// Stand-in reflection when the model never returns a usable one.
pub const FALLBACK_REFLECTION: &str = "(reflection unavailable)";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ItemError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("gold label `{0}` is not a single letter A-Z")]
    BadGold(String),
    #[error("gold label {gold} is outside the {count} options")]
    GoldOutOfRange { gold: String, count: usize },
}

/// One question with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: String,
    pub question: String,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

/// Strips whitespace and surrounding parentheses ("(B)", "B)"), uppercases.
pub fn normalize_label(raw: &str) -> String {
    let t = raw.trim();
    let t = t.strip_prefix('(').unwrap_or(t);
    let t = t.strip_suffix(')').unwrap_or(t);
    t.trim().to_uppercase()
}

impl QueryItem {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold: &str,
        options: Option<Vec<String>>,
    ) -> Result<Self, ItemError> {
        let question = question.into();
        if question.trim().is_empty() {
            return Err(ItemError::EmptyQuestion);
        }
        let gold = normalize_label(gold);
        let mut chars = gold.chars();
        let letter = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => c,
            _ => return Err(ItemError::BadGold(gold)),
        };
        if let Some(opts) = &options {
            let idx = (letter as u8 - b'A') as usize;
            if idx >= opts.len() {
                return Err(ItemError::GoldOutOfRange {
                    gold,
                    count: opts.len(),
                });
            }
        }
        Ok(Self {
            id: id.into(),
            question,
            gold,
            options,
        })
    }

    /// Question text as shown to the model, options on their own lines.
    pub fn prompt_text(&self) -> String {
        match &self.options {
            Some(opts) if !opts.is_empty() => format!("{}\n{}", self.question, opts.join("\n")),
            _ => self.question.clone(),
        }
    }
}

/// The letter of the last `Answer: (X)` or `Answer: X` in `reply`.
pub fn extract_final_answer(reply: &str) -> Option<String> {
    let lower = reply.to_ascii_lowercase();
    let bytes = reply.as_bytes();
    let mut found = None;
    for (pos, _) in lower.match_indices("answer:") {
        let mut i = pos + "answer:".len();
        while i < bytes.len() && (bytes[i] == b' ' || bytes[i] == b'\t' || bytes[i] == b'*') {
            i += 1;
        }
        let paren = i < bytes.len() && bytes[i] == b'(';
        if paren {
            i += 1;
        }
        if i >= bytes.len() || !bytes[i].is_ascii_alphabetic() {
            continue;
        }
        let letter = bytes[i].to_ascii_uppercase() as char;
        let next = bytes.get(i + 1).copied();
        let ok = if paren {
            next == Some(b')')
        } else {
            next.is_none_or(|b| !b.is_ascii_alphanumeric())
        };
        if ok {
            found = Some(letter.to_string());
        }
    }
    found
}

/// φ: exact letter match, case-insensitive.
pub fn evaluate(pred: Option<&str>, gold: &str) -> bool {
    pred.is_some_and(|p| p.eq_ignore_ascii_case(gold.trim()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub success: bool,
    /// Full text of the last answer reply.
    pub final_answer: String,
    pub extracted_label: Option<String>,
    pub reflections: Vec<String>,
    pub attempts_used: u32,
    pub transcript: Vec<TranscriptEntry>,
    /// Every wrong answer, paired with the reflection it prompted.
    #[serde(skip)]
    pub failed_attempts: Vec<FailedAttempt>,
}

impl AttemptOutcome {
    pub fn chat_calls(&self) -> usize {
        self.transcript.len()
    }
}

impl<'a> Engine<'a> {
    pub(crate) fn answer_prompt(
        &self,
        question: &str,
        recalled: &RetrievalResult,
        reflections: &[String],
    ) -> Result<String, EngineError> {
        let b = Bindings::new()
            .set("init_instruction", self.params.init_instruction.as_str())
            .set("rules", format_rules(&recalled.error_patterns))
            .set(
                "templates",
                format_templates_block(recalled.templates.iter().map(|(t, _)| t)),
            )
            .set("reflections", format_reflections(reflections))
            .set("question", question)
            .set("output_format", self.params.output_format.as_str());
        self.render(PromptKind::Answer, &b)
    }

    fn reflect_prompt(
        &self,
        question: &str,
        recalled: &RetrievalResult,
        reflections: &[String],
        wrong: &str,
    ) -> Result<String, EngineError> {
        let prior = if reflections.is_empty() {
            NONE_BLOCK.to_string()
        } else {
            format_reflections(reflections)
        };
        let b = Bindings::new()
            .set("question", question)
            .set("rules", format_rules(&recalled.error_patterns))
            .set(
                "templates",
                format_templates_block(recalled.templates.iter().map(|(t, _)| t)),
            )
            .set("reflections", prior)
            .set("wrong_pred", wrong);
        self.render(PromptKind::Reflect, &b)
    }

    /// Retrieves, answers, and on failure reflects and retries up to
    /// `max_retries` times. Memory is only read.
    pub fn run_training_attempt(
        &self,
        item: &QueryItem,
        memory: &Memory,
    ) -> Result<(AttemptOutcome, RetrievalResult), EngineError> {
        let question = item.prompt_text();
        let recalled = retrieve(&question, memory, self.gateway, self.params, Mode::Train)?;
        let mut transcript = Vec::new();
        let mut reflections: Vec<String> = Vec::new();
        let mut failed = Vec::new();
        let budget = 1 + self.params.max_retries;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let prompt = self.answer_prompt(&question, &recalled, &reflections)?;
            let reply = self.complete(PromptKind::Answer, prompt, self.params.temperature, &mut transcript)?;
            let label = extract_final_answer(&reply);
            if evaluate(label.as_deref(), &item.gold) {
                let outcome = AttemptOutcome {
                    success: true,
                    final_answer: reply,
                    extracted_label: label,
                    reflections,
                    attempts_used: attempts,
                    transcript,
                    failed_attempts: failed,
                };
                return Ok((outcome, recalled));
            }
            if attempts >= budget {
                failed.push(FailedAttempt {
                    answer: reply.clone(),
                    reflection: None,
                });
                let outcome = AttemptOutcome {
                    success: false,
                    final_answer: reply,
                    extracted_label: label,
                    reflections,
                    attempts_used: attempts,
                    transcript,
                    failed_attempts: failed,
                };
                return Ok((outcome, recalled));
            }
            let prompt = self.reflect_prompt(&question, &recalled, &reflections, &reply)?;
            let (parsed, _) =
                self.ask_structured(PromptKind::Reflect, prompt, parse_reflect, &mut transcript)?;
            let reflection = parsed
                .map(|r| r.reflection)
                .unwrap_or_else(|_| FALLBACK_REFLECTION.to_string());
            failed.push(FailedAttempt {
                answer: reply,
                reflection: Some(reflection.clone()),
            });
            reflections.push(reflection);
        }
    }

    /// One answer call over infer-mode retrieval; no reflection, no writes.
    pub fn run_inference(&self, item: &QueryItem, memory: &Memory) -> Result<AttemptOutcome, EngineError> {
        let question = item.prompt_text();
        let recalled = retrieve(&question, memory, self.gateway, self.params, Mode::Infer)?;
        let mut transcript = Vec::new();
        let prompt = self.answer_prompt(&question, &recalled, &[])?;
        let reply = self.complete(PromptKind::Answer, prompt, self.params.temperature, &mut transcript)?;
        let label = extract_final_answer(&reply);
        Ok(AttemptOutcome {
            success: evaluate(label.as_deref(), &item.gold),
            final_answer: reply,
            extracted_label: label,
            reflections: Vec::new(),
            attempts_used: 1,
            transcript,
            failed_attempts: Vec::new(),
        })
    }
}
