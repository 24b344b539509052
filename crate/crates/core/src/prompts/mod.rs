//! Meta-prompt rendering and structured reply parsing.
//!
//! The seven meta-prompt texts ship embedded in the crate and can be
//! overridden from a directory holding one plain-text file per kind
//! (`answer.txt`, `reflect.txt`, ...). Placeholders are `{snake_case}` names;
//! any other brace sequence (the JSON examples inside the prompts) is copied
//! through untouched.

mod blocks;
mod reply;

pub use blocks::{
    format_bad_cases, format_failed_attempts, format_reflections, format_rules,
    format_template, format_templates_block, reflections_block, FailedAttempt, NONE_BLOCK,
};
pub use reply::{
    extract_json_object, parse, parse_action_plan, parse_create, parse_merge_plan,
    parse_pattern_update, parse_reflect, parse_summary, ActionPlan, CreateReply, MergeGroup,
    MergePlan, PatternUpdateReply, ReflectReply, StructuredReply, SummaryReply, TemplateAction,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("{kind:?} prompt is missing binding `{name}`")]
    MissingBinding { kind: PromptKind, name: String },
    #[error("{kind:?} prompt has unknown placeholder or binding `{name}`")]
    UnknownPlaceholder { kind: PromptKind, name: String },
    #[error("no JSON object found in reply")]
    NoJsonFound,
    #[error("reply violates the {kind:?} schema: {reason}")]
    SchemaViolation { kind: PromptKind, reason: String },
    #[error("{kind:?} replies are free text and have no schema")]
    Unstructured { kind: PromptKind },
    #[error("failed to read prompt override {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    Answer,
    Reflect,
    TemplateCreate,
    TemplateUpdate,
    TemplateMerge,
    ErrorSummarize,
    ErrorUpdate,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Answer,
        PromptKind::Reflect,
        PromptKind::TemplateCreate,
        PromptKind::TemplateUpdate,
        PromptKind::TemplateMerge,
        PromptKind::ErrorSummarize,
        PromptKind::ErrorUpdate,
    ];

    /// Names every rendering of this kind must bind.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::Answer => &[
                "init_instruction",
                "rules",
                "templates",
                "reflections",
                "question",
                "output_format",
            ],
            PromptKind::Reflect => &["question", "rules", "templates", "reflections", "wrong_pred"],
            PromptKind::TemplateCreate => {
                &["question", "reflections", "correct_pred", "reflections_block"]
            }
            PromptKind::TemplateUpdate => &[
                "recalled_templates",
                "question",
                "correct_pred",
                "reflections_block",
            ],
            PromptKind::TemplateMerge => &["all_templates", "total", "limit", "target"],
            PromptKind::ErrorSummarize => &["question", "correct_pred", "failed_attempts"],
            PromptKind::ErrorUpdate => &[
                "current_pattern",
                "historical_bad_cases",
                "new_question",
                "new_ground_truth",
                "new_wrong_pred",
                "new_reflection",
            ],
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Answer => "answer.txt",
            PromptKind::Reflect => "reflect.txt",
            PromptKind::TemplateCreate => "template_create.txt",
            PromptKind::TemplateUpdate => "template_update.txt",
            PromptKind::TemplateMerge => "template_merge.txt",
            PromptKind::ErrorSummarize => "error_summarize.txt",
            PromptKind::ErrorUpdate => "error_update.txt",
        }
    }

    pub fn builtin_text(self) -> &'static str {
        match self {
            PromptKind::Answer => include_str!("templates/answer.txt"),
            PromptKind::Reflect => include_str!("templates/reflect.txt"),
            PromptKind::TemplateCreate => include_str!("templates/template_create.txt"),
            PromptKind::TemplateUpdate => include_str!("templates/template_update.txt"),
            PromptKind::TemplateMerge => include_str!("templates/template_merge.txt"),
            PromptKind::ErrorSummarize => include_str!("templates/error_summarize.txt"),
            PromptKind::ErrorUpdate => include_str!("templates/error_update.txt"),
        }
    }
}

/// Named slot values for one rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.0.remove(name)
    }
}

impl<K: Into<String>, V: Into<String>> FromIterator<(K, V)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v.into())).collect())
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

/// Splits a template into literal runs and `{snake_case}` placeholders.
fn pieces(text: &str) -> Vec<Piece<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            if j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                while j < bytes.len()
                    && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_')
                {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'}' {
                    if lit_start < i {
                        out.push(Piece::Literal(&text[lit_start..i]));
                    }
                    out.push(Piece::Placeholder(&text[i + 1..j]));
                    i = j + 1;
                    lit_start = i;
                    continue;
                }
            }
        }
        i += 1;
    }
    if lit_start < text.len() {
        out.push(Piece::Literal(&text[lit_start..]));
    }
    out
}

/// Placeholder names appearing in `text`, in order of first appearance.
pub fn placeholders(text: &str) -> Vec<&str> {
    let mut seen = Vec::new();
    for p in pieces(text) {
        if let Piece::Placeholder(name) = p {
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
    }
    seen
}

/// Drops the `<REFLECTIONS>` section and the blank line before it.
fn strip_reflections_section(text: &str) -> String {
    let Some(start) = text.find("<REFLECTIONS>") else {
        return text.to_string();
    };
    let close = "</REFLECTIONS>";
    let Some(rel) = text[start..].find(close) else {
        return text.to_string();
    };
    let mut end = start + rel + close.len();
    if text[end..].starts_with('\n') {
        end += 1;
    }
    let mut begin = start;
    if text[..begin].ends_with("\n\n") {
        begin -= 1;
    }
    format!("{}{}", &text[..begin], &text[end..])
}

/// Drops the whole line holding `{name}`.
fn strip_placeholder_line(text: &str, name: &str) -> String {
    let needle = format!("{{{name}}}");
    let Some(pos) = text.find(&needle) else {
        return text.to_string();
    };
    let line_start = text[..pos].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[pos..]
        .find('\n')
        .map_or(text.len(), |i| pos + i + 1);
    format!("{}{}", &text[..line_start], &text[line_end..])
}

/// The active set of meta-prompt texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLibrary {
    texts: BTreeMap<PromptKind, String>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        Self {
            texts: PromptKind::ALL
                .iter()
                .map(|k| (*k, k.builtin_text().to_string()))
                .collect(),
        }
    }

    /// Built-in texts overlaid with whichever `<kind>.txt` files exist in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, CodecError> {
        let mut lib = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| CodecError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                lib.set(kind, text)?;
            }
        }
        Ok(lib)
    }

    /// Replaces one text, rejecting placeholders the kind does not define.
    pub fn set(&mut self, kind: PromptKind, text: String) -> Result<(), CodecError> {
        if let Some(bad) = placeholders(&text)
            .into_iter()
            .find(|p| !kind.slots().contains(p))
        {
            return Err(CodecError::UnknownPlaceholder {
                kind,
                name: bad.to_string(),
            });
        }
        self.texts.insert(kind, text);
        Ok(())
    }

    pub fn text(&self, kind: PromptKind) -> &str {
        &self.texts[&kind]
    }

    /// Substitutes `bindings` into the stored text for `kind`.
    ///
    /// An empty `reflections` binding removes the Answer prompt's REFLECTIONS
    /// section, and an empty `reflections_block` removes its line.
    pub fn render(&self, kind: PromptKind, bindings: &Bindings) -> Result<String, CodecError> {
        for slot in kind.slots() {
            if bindings.get(slot).is_none() {
                return Err(CodecError::MissingBinding {
                    kind,
                    name: slot.to_string(),
                });
            }
        }
        if let Some(extra) = bindings.0.keys().find(|k| !kind.slots().contains(&k.as_str())) {
            return Err(CodecError::UnknownPlaceholder {
                kind,
                name: extra.clone(),
            });
        }

        let mut text = self.text(kind).to_string();
        if kind == PromptKind::Answer && bindings.get("reflections").unwrap_or("").trim().is_empty() {
            text = strip_reflections_section(&text);
        }
        if bindings
            .get("reflections_block")
            .is_some_and(|b| b.trim().is_empty())
        {
            text = strip_placeholder_line(&text, "reflections_block");
        }

        let mut out = String::with_capacity(text.len() * 2);
        for piece in pieces(&text) {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(name) => match bindings.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(CodecError::UnknownPlaceholder {
                            kind,
                            name: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Renders with the built-in texts.
pub fn render(kind: PromptKind, bindings: &Bindings) -> Result<String, CodecError> {
    PromptLibrary::builtin().render(kind, bindings)
}
