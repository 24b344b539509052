//! Dual-memory domain types: the correct-template memory (CTM) and the
//! error-pattern memory (EPM), plus their local mutation primitives.
//!
//! Nothing here talks to a model. Embeddings live next door in
//! [`crate::store::Memory`], which pairs a [`MemoryState`] with its vector
//! indexes.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("template {id} holds {len} cases, limit is {limit}")]
    TooManyCases { id: String, len: usize, limit: usize },
    #[error("template {id} holds duplicate case question")]
    DuplicateCase { id: String },
}

fn require(field: &'static str, value: &str) -> Result<(), MemoryError> {
    if value.trim().is_empty() {
        Err(MemoryError::EmptyField(field))
    } else {
        Ok(())
    }
}

/// A verified (question, correct answer) exemplar grounding a template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub question: String,
    pub answer: String,
}

impl Case {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        require("case.question", &self.question)?;
        require("case.answer", &self.answer)
    }
}

/// Bounds on a template's case list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseLimits {
    pub case_cap: usize,
    pub min_retained: usize,
}

impl Default for CaseLimits {
    fn default() -> Self {
        Self {
            case_cap: 20,
            min_retained: 3,
        }
    }
}

impl CaseLimits {
    /// Length a case list is trimmed back to once it overflows.
    pub fn retained_len(&self) -> usize {
        self.case_cap.max(self.min_retained).max(1)
    }
}

/// One CTM entry: applicability index, reasoning strategy and supporting cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub index_text: String,
    pub strategy_text: String,
    pub cases: Vec<Case>,
    pub created_at: u64,
    pub updated_at: u64,
}

impl Template {
    pub fn new(
        id: impl Into<String>,
        index_text: impl Into<String>,
        strategy_text: impl Into<String>,
        case: Case,
        step: u64,
    ) -> Result<Self, MemoryError> {
        let index_text = index_text.into();
        let strategy_text = strategy_text.into();
        require("index_text", &index_text)?;
        require("strategy_text", &strategy_text)?;
        case.validate()?;
        Ok(Self {
            id: id.into(),
            index_text,
            strategy_text,
            cases: vec![case],
            created_at: step,
            updated_at: step,
        })
    }

    pub fn has_question(&self, question: &str) -> bool {
        self.cases.iter().any(|c| c.question == question)
    }

    /// Appends `case` unless a case with the same question is already held.
    ///
    /// Overflowing lists drop their oldest entries. Returns whether the
    /// template changed.
    pub fn append_case(
        &mut self,
        case: Case,
        step: u64,
        limits: CaseLimits,
    ) -> Result<bool, MemoryError> {
        case.validate()?;
        if self.has_question(&case.question) {
            return Ok(false);
        }
        self.cases.push(case);
        let keep = limits.retained_len();
        if self.cases.len() > keep {
            let excess = self.cases.len() - keep;
            self.cases.drain(..excess);
        }
        self.updated_at = step;
        Ok(true)
    }

    /// Most recently appended case; the one shown as the template's example.
    pub fn latest_case(&self) -> Option<&Case> {
        self.cases.last()
    }

    pub fn validate(&self, limits: CaseLimits) -> Result<(), MemoryError> {
        require("template.id", &self.id)?;
        require("index_text", &self.index_text)?;
        require("strategy_text", &self.strategy_text)?;
        if self.cases.is_empty() {
            return Err(MemoryError::EmptyField("template.cases"));
        }
        for case in &self.cases {
            case.validate()?;
        }
        if self.cases.len() > limits.retained_len() {
            return Err(MemoryError::TooManyCases {
                id: self.id.clone(),
                len: self.cases.len(),
                limit: limits.retained_len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if !self.cases.iter().all(|c| seen.insert(c.question.as_str())) {
            return Err(MemoryError::DuplicateCase {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

/// Evidence that contributed to an error pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadCase {
    pub question: String,
    pub gold_answer: String,
    pub wrong_answer: String,
    /// May be empty when the attempt ran out of retries before reflecting.
    pub reflection: String,
}

impl BadCase {
    pub fn validate(&self) -> Result<(), MemoryError> {
        require("bad_case.question", &self.question)?;
        require("bad_case.gold_answer", &self.gold_answer)?;
        require("bad_case.wrong_answer", &self.wrong_answer)
    }
}

/// One EPM entry: a generalized failure rule and its bad cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPattern {
    pub id: String,
    pub pattern_text: String,
    pub bad_cases: Vec<BadCase>,
    pub created_at: u64,
    pub updated_at: u64,
}

impl ErrorPattern {
    pub fn new(
        id: impl Into<String>,
        pattern_text: impl Into<String>,
        bad_case: BadCase,
        step: u64,
    ) -> Result<Self, MemoryError> {
        let pattern_text = pattern_text.into();
        require("pattern_text", &pattern_text)?;
        bad_case.validate()?;
        Ok(Self {
            id: id.into(),
            pattern_text,
            bad_cases: vec![bad_case],
            created_at: step,
            updated_at: step,
        })
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        require("pattern.id", &self.id)?;
        require("pattern_text", &self.pattern_text)?;
        if self.bad_cases.is_empty() {
            return Err(MemoryError::EmptyField("pattern.bad_cases"));
        }
        self.bad_cases.iter().try_for_each(BadCase::validate)
    }
}

/// Outcome of a removal; unknown ids are reported, not raised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Removal<T> {
    Removed(T),
    Unknown,
}

impl<T> Removal<T> {
    pub fn is_unknown(&self) -> bool {
        matches!(self, Removal::Unknown)
    }
}

/// The dual memory: CTM templates, EPM patterns and the engine step counter.
///
/// Ids are handed out monotonically (`t-<n>`, `e-<n>`) and never reused,
/// even after removal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub ctm: Vec<Template>,
    pub epm: Vec<ErrorPattern>,
    pub step: u64,
    pub next_template_id: u64,
    pub next_pattern_id: u64,
}

impl Default for MemoryState {
    fn default() -> Self {
        Self {
            ctm: Vec::new(),
            epm: Vec::new(),
            step: 0,
            next_template_id: 1,
            next_pattern_id: 1,
        }
    }
}

impl MemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    fn allocate_template_id(&mut self) -> String {
        let id = format!("t-{}", self.next_template_id);
        self.next_template_id += 1;
        id
    }

    fn allocate_pattern_id(&mut self) -> String {
        let id = format!("e-{}", self.next_pattern_id);
        self.next_pattern_id += 1;
        id
    }

    /// Builds a template with a fresh id stamped at the current step.
    /// The template is not inserted.
    pub fn create_template(
        &mut self,
        index_text: &str,
        strategy_text: &str,
        case: Case,
    ) -> Result<Template, MemoryError> {
        // validate before burning an id
        require("index_text", index_text)?;
        require("strategy_text", strategy_text)?;
        case.validate()?;
        let id = self.allocate_template_id();
        Template::new(id, index_text, strategy_text, case, self.step)
    }

    pub fn create_pattern(
        &mut self,
        pattern_text: &str,
        bad_case: BadCase,
    ) -> Result<ErrorPattern, MemoryError> {
        require("pattern_text", pattern_text)?;
        bad_case.validate()?;
        let id = self.allocate_pattern_id();
        ErrorPattern::new(id, pattern_text, bad_case, self.step)
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.ctm.iter().find(|t| t.id == id)
    }

    pub fn template_mut(&mut self, id: &str) -> Option<&mut Template> {
        self.ctm.iter_mut().find(|t| t.id == id)
    }

    pub fn pattern(&self, id: &str) -> Option<&ErrorPattern> {
        self.epm.iter().find(|p| p.id == id)
    }

    pub fn pattern_mut(&mut self, id: &str) -> Option<&mut ErrorPattern> {
        self.epm.iter_mut().find(|p| p.id == id)
    }

    /// Removes a template by id. Unknown ids leave the state untouched.
    pub fn remove_template(&mut self, id: &str) -> Removal<Template> {
        match self.ctm.iter().position(|t| t.id == id) {
            Some(pos) => Removal::Removed(self.ctm.remove(pos)),
            None => {
                warn!(id, "remove_template: unknown template id");
                Removal::Unknown
            }
        }
    }
}
