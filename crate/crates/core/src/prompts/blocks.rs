//! Text blocks substituted into the meta-prompts.

use crate::memory::{BadCase, Case, ErrorPattern, Template};

/// Placeholder for sections with nothing to show.
pub const NONE_BLOCK: &str = "(none)";

/// One failed answer and the reflection it prompted, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailedAttempt {
    pub answer: String,
    pub reflection: Option<String>,
}

/// Renders one template with `example` as its shown case.
pub fn format_template(template: &Template, example: Option<&Case>) -> String {
    let mut out = format!(
        "[{}] WHEN TO USE: {}\nSTRATEGY: {}",
        template.id, template.index_text, template.strategy_text
    );
    if let Some(case) = example {
        out.push_str(&format!(
            "\nEXAMPLE:\nquestion: {}\nanswer: {}",
            case.question, case.answer
        ));
    }
    out
}

/// Templates in the given order, each with its most recent case.
pub fn format_templates_block<'a>(templates: impl IntoIterator<Item = &'a Template>) -> String {
    let blocks: Vec<String> = templates
        .into_iter()
        .map(|t| format_template(t, t.latest_case()))
        .collect();
    if blocks.is_empty() {
        NONE_BLOCK.to_string()
    } else {
        blocks.join("\n\n")
    }
}

fn numbered<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items
        .into_iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_rules<'a>(patterns: impl IntoIterator<Item = &'a ErrorPattern>) -> String {
    let out = numbered(patterns.into_iter().map(|p| p.pattern_text.as_str()));
    if out.is_empty() {
        NONE_BLOCK.to_string()
    } else {
        out
    }
}

/// Numbered reflections; empty string when there are none.
pub fn format_reflections(reflections: &[String]) -> String {
    numbered(reflections.iter().map(String::as_str))
}

pub fn format_failed_attempts(attempts: &[FailedAttempt]) -> String {
    if attempts.is_empty() {
        return NONE_BLOCK.to_string();
    }
    attempts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut s = format!("Attempt {}:\nanswer: {}", i + 1, a.answer);
            if let Some(r) = &a.reflection {
                s.push_str(&format!("\nreflection: {r}"));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Prior failed attempts wrapped in tags; empty when no attempt failed.
pub fn reflections_block(attempts: &[FailedAttempt]) -> String {
    if attempts.is_empty() {
        return String::new();
    }
    format!(
        "<PRIOR_FAILED_ATTEMPTS>\n{}\n</PRIOR_FAILED_ATTEMPTS>",
        format_failed_attempts(attempts)
    )
}

pub fn format_bad_cases(cases: &[BadCase]) -> String {
    if cases.is_empty() {
        return NONE_BLOCK.to_string();
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "{}. question: {}\n   correct_answer: {}\n   wrong_answer: {}\n   reflection: {}",
                i + 1,
                c.question,
                c.gold_answer,
                c.wrong_answer,
                c.reflection
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}
