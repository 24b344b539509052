//! Stage III: fold an attempt's experience back into memory.
//!
//! Successes grow and refine the CTM (create, per-template actions gated by
//! verification, consolidation past capacity). Failures are summarized into
//! the EPM, refining the closest existing pattern or adding a new one.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::engine::{Engine, TranscriptEntry};
use crate::error::EngineError;
use crate::memory::{BadCase, Case, Template};
use crate::prompts::{
    format_bad_cases, format_failed_attempts, format_reflections, format_template,
    format_templates_block, parse_action_plan, parse_create, parse_merge_plan,
    parse_pattern_update, parse_summary, reflections_block, Bindings, CreateReply, FailedAttempt,
    MergePlan, PromptKind, TemplateAction, NONE_BLOCK,
};
use crate::reflection::{evaluate, extract_final_answer, normalize_label, AttemptOutcome, QueryItem};
use crate::retrieval::RetrievalResult;
use crate::store::Memory;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub members: Vec<String>,
    pub merged_id: String,
}

/// How the consolidation pass of a stage ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationEnd {
    WithinLimit,
    EmptyPlan,
    NoProgress,
    Unparseable,
}

/// What one update stage changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryDelta {
    pub added_templates: Vec<String>,
    pub updated_templates: Vec<String>,
    pub deleted_template_ids: Vec<String>,
    /// Templates that received the item's case.
    pub appended_cases: Vec<String>,
    pub added_patterns: Vec<String>,
    pub refined_patterns: Vec<String>,
    /// Patterns that received the item's bad case.
    pub bad_case_appends: Vec<String>,
    pub merge_events: Vec<MergeEvent>,
    pub verification_failures: u32,
    /// The action plan could not be parsed, so no action was applied.
    pub plan_skipped: bool,
    pub consolidation_rounds: u32,
    pub consolidation_end: Option<ConsolidationEnd>,
    pub transcript: Vec<TranscriptEntry>,
}

impl MemoryDelta {
    fn absorb(&mut self, other: MemoryDelta) {
        self.added_templates.extend(other.added_templates);
        self.deleted_template_ids.extend(other.deleted_template_ids);
        self.merge_events.extend(other.merge_events);
        self.consolidation_rounds += other.consolidation_rounds;
        self.consolidation_end = other.consolidation_end.or(self.consolidation_end);
        self.transcript.extend(other.transcript);
    }
}

/// Dedups by question, keeping the first occurrence, then keeps the newest
/// `limit` cases.
fn union_cases(lists: &[&[Case]], limit: usize) -> Vec<Case> {
    let mut seen = BTreeSet::new();
    let mut out: Vec<Case> = Vec::new();
    for list in lists {
        for c in *list {
            if seen.insert(c.question.clone()) {
                out.push(c.clone());
            }
        }
    }
    if out.len() > limit {
        out.drain(..out.len() - limit);
    }
    out
}

/// Label a stored case answer grades against.
fn case_gold(case: &Case) -> String {
    extract_final_answer(&case.answer).unwrap_or_else(|| normalize_label(&case.answer))
}

impl<'a> Engine<'a> {
    fn item_case(&self, item: &QueryItem, outcome: &AttemptOutcome) -> Case {
        Case::new(item.prompt_text(), outcome.final_answer.clone())
    }

    /// Renders TemplateCreate for this interaction and inserts the result.
    fn create_from_interaction(
        &self,
        item: &QueryItem,
        outcome: &AttemptOutcome,
        memory: &mut Memory,
        delta: &mut MemoryDelta,
    ) -> Result<Option<String>, EngineError> {
        let reflections = if outcome.reflections.is_empty() {
            NONE_BLOCK.to_string()
        } else {
            format_reflections(&outcome.reflections)
        };
        let b = Bindings::new()
            .set("question", item.prompt_text())
            .set("reflections", reflections)
            .set("correct_pred", outcome.final_answer.as_str())
            .set("reflections_block", reflections_block(&outcome.failed_attempts));
        let prompt = self.render(PromptKind::TemplateCreate, &b)?;
        let (parsed, _) =
            self.ask_structured(PromptKind::TemplateCreate, prompt, parse_create, &mut delta.transcript)?;
        match parsed {
            Ok(CreateReply {
                when_to_use,
                strategy,
            }) => {
                let id = self.add_template(&when_to_use, &strategy, self.item_case(item, outcome), memory)?;
                delta.added_templates.push(id.clone());
                Ok(Some(id))
            }
            Err(e) => {
                warn!(item = %item.id, error = %e, "template creation skipped");
                Ok(None)
            }
        }
    }

    fn add_template(
        &self,
        when_to_use: &str,
        strategy: &str,
        case: Case,
        memory: &mut Memory,
    ) -> Result<String, EngineError> {
        let vector = self.gateway.embed_one(when_to_use)?;
        let t = memory.state.create_template(when_to_use, strategy, case)?;
        let id = t.id.clone();
        memory.insert_template(t, vector)?;
        Ok(id)
    }

    /// Stage III after a success.
    pub fn update_after_success<R: Rng + ?Sized>(
        &self,
        item: &QueryItem,
        outcome: &AttemptOutcome,
        recalled: &RetrievalResult,
        memory: &mut Memory,
        rng: &mut R,
    ) -> Result<MemoryDelta, EngineError> {
        let mut delta = MemoryDelta::default();
        let step = memory.state.step;
        if recalled.templates.is_empty() {
            self.create_from_interaction(item, outcome, memory, &mut delta)?;
        } else {
            let limits = self.params.case_limits();
            let recalled_ids = recalled.template_ids();
            for id in &recalled_ids {
                if let Some(t) = memory.state.template_mut(id) {
                    if t.append_case(self.item_case(item, outcome), step, limits)? {
                        delta.appended_cases.push(id.clone());
                    }
                }
            }

            let b = Bindings::new()
                .set(
                    "recalled_templates",
                    format_templates_block(recalled.templates.iter().map(|(t, _)| t)),
                )
                .set("question", item.prompt_text())
                .set("correct_pred", outcome.final_answer.as_str())
                .set("reflections_block", reflections_block(&outcome.failed_attempts));
            let prompt = self.render(PromptKind::TemplateUpdate, &b)?;
            let (parsed, _) = self.ask_structured(
                PromptKind::TemplateUpdate,
                prompt,
                |r| parse_action_plan(r, &recalled_ids),
                &mut delta.transcript,
            )?;
            match parsed {
                Ok(plan) => self.apply_plan(item, outcome, plan.actions, memory, rng, &mut delta)?,
                Err(e) => {
                    warn!(item = %item.id, error = %e, "action plan unusable; actions skipped");
                    delta.plan_skipped = true;
                }
            }
        }

        if memory.state.ctm.len() > self.params.capacity {
            let c = self.consolidate(memory)?;
            delta.absorb(c);
        }
        Ok(delta)
    }

    fn apply_plan<R: Rng + ?Sized>(
        &self,
        item: &QueryItem,
        outcome: &AttemptOutcome,
        actions: Vec<TemplateAction>,
        memory: &mut Memory,
        rng: &mut R,
        delta: &mut MemoryDelta,
    ) -> Result<(), EngineError> {
        let step = memory.state.step;
        let mut fallback_used = false;
        for action in actions {
            match action {
                TemplateAction::None { .. } => {}
                TemplateAction::Delete { template_id } => {
                    if !memory.remove_template(&template_id).is_unknown() {
                        delta.deleted_template_ids.push(template_id);
                    }
                }
                TemplateAction::Add {
                    when_to_use,
                    strategy,
                } => {
                    let id = self.add_template(&when_to_use, &strategy, self.item_case(item, outcome), memory)?;
                    delta.added_templates.push(id);
                }
                TemplateAction::Update {
                    template_id,
                    when_to_use,
                    strategy,
                } => {
                    let Some(original) = memory.state.template(&template_id).cloned() else {
                        warn!(id = %template_id, "update targets a template that no longer exists");
                        continue;
                    };
                    let mut candidate = original.clone();
                    if let Some(w) = when_to_use {
                        candidate.index_text = w;
                    }
                    if let Some(s) = strategy {
                        candidate.strategy_text = s;
                    }
                    if candidate.index_text == original.index_text
                        && candidate.strategy_text == original.strategy_text
                    {
                        continue;
                    }
                    if self.verify_updated_template(&candidate, &original, rng, &mut delta.transcript) {
                        if candidate.index_text != original.index_text {
                            let v = self.gateway.embed_one(&candidate.index_text)?;
                            memory.set_template_vector(&template_id, v)?;
                        }
                        let t = memory
                            .state
                            .template_mut(&template_id)
                            .expect("template checked above");
                        t.index_text = candidate.index_text;
                        t.strategy_text = candidate.strategy_text;
                        t.updated_at = step;
                        delta.updated_templates.push(template_id);
                    } else {
                        info!(id = %template_id, "update rejected by verification");
                        delta.verification_failures += 1;
                        if !fallback_used {
                            fallback_used = true;
                            self.create_from_interaction(item, outcome, memory, delta)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// True iff `candidate` answers every sampled case of `original`.
    /// Provider errors count as failures.
    pub fn verify_updated_template<R: Rng + ?Sized>(
        &self,
        candidate: &Template,
        original: &Template,
        rng: &mut R,
        transcript: &mut Vec<TranscriptEntry>,
    ) -> bool {
        let n = original.cases.len();
        let amount = self.params.verify_samples.min(n);
        for idx in sample(rng, n, amount) {
            let case = &original.cases[idx];
            // show some other case as the example so the answer is not handed over
            let example = candidate
                .cases
                .iter()
                .rev()
                .find(|c| c.question != case.question);
            let b = Bindings::new()
                .set("init_instruction", self.params.init_instruction.as_str())
                .set("rules", NONE_BLOCK)
                .set("templates", format_template(candidate, example))
                .set("reflections", "")
                .set("question", case.question.as_str())
                .set("output_format", self.params.output_format.as_str());
            let passed = self
                .render(PromptKind::Answer, &b)
                .and_then(|p| self.complete(PromptKind::Answer, p, self.params.temperature, transcript))
                .map(|reply| evaluate(extract_final_answer(&reply).as_deref(), &case_gold(case)));
            match passed {
                Ok(true) => {}
                Ok(false) => return false,
                Err(e) => {
                    warn!(id = %original.id, error = %e, "verification call failed");
                    return false;
                }
            }
        }
        true
    }

    /// Merges templates while the CTM is above capacity.
    pub fn consolidate(&self, memory: &mut Memory) -> Result<MemoryDelta, EngineError> {
        let mut delta = MemoryDelta::default();
        let limit = self.params.capacity;
        while memory.state.ctm.len() > limit {
            delta.consolidation_rounds += 1;
            let b = Bindings::new()
                .set("all_templates", format_templates_block(&memory.state.ctm))
                .set("total", memory.state.ctm.len().to_string())
                .set("limit", limit.to_string())
                .set("target", self.params.target.to_string());
            let prompt = self.render(PromptKind::TemplateMerge, &b)?;
            let (parsed, _) =
                self.ask_structured(PromptKind::TemplateMerge, prompt, parse_merge_plan, &mut delta.transcript)?;
            let plan = match parsed {
                Ok(p) => p,
                Err(e) => {
                    warn!(error = %e, "merge plan unusable; consolidation skipped");
                    delta.consolidation_end = Some(ConsolidationEnd::Unparseable);
                    return Ok(delta);
                }
            };
            if plan.merge_groups.is_empty() {
                info!(size = memory.state.ctm.len(), "merge plan empty; staying above capacity");
                delta.consolidation_end = Some(ConsolidationEnd::EmptyPlan);
                return Ok(delta);
            }
            let before = memory.state.ctm.len();
            self.apply_merge_plan(plan, memory, &mut delta)?;
            if memory.state.ctm.len() >= before {
                delta.consolidation_end = Some(ConsolidationEnd::NoProgress);
                return Ok(delta);
            }
        }
        delta.consolidation_end = Some(ConsolidationEnd::WithinLimit);
        Ok(delta)
    }

    fn apply_merge_plan(
        &self,
        plan: MergePlan,
        memory: &mut Memory,
        delta: &mut MemoryDelta,
    ) -> Result<(), EngineError> {
        let mut used: BTreeSet<String> = BTreeSet::new();
        for group in plan.merge_groups {
            let mut members: Vec<String> = Vec::new();
            let mut valid = true;
            for raw in &group.template_ids {
                match resolve_template_id(memory, raw) {
                    Some(id) if !members.contains(&id) => members.push(id),
                    Some(_) => {}
                    None => valid = false,
                }
            }
            if !valid || members.len() < 2 || members.iter().any(|m| used.contains(m)) {
                warn!(ids = ?group.template_ids, "merge group dropped: needs two or more unused, existing ids");
                continue;
            }
            let templates: Vec<Template> = members
                .iter()
                .map(|id| memory.state.template(id).expect("resolved").clone())
                .collect();
            let lists: Vec<&[Case]> = templates.iter().map(|t| t.cases.as_slice()).collect();
            let cases = union_cases(&lists, self.params.case_limits().retained_len());

            let vector = self.gateway.embed_one(&group.merged_when_to_use)?;
            let mut merged = memory.state.create_template(
                &group.merged_when_to_use,
                &group.merged_strategy,
                cases[0].clone(),
            )?;
            merged.cases = cases;
            for id in &members {
                memory.remove_template(id);
                used.insert(id.clone());
            }
            let merged_id = merged.id.clone();
            memory.insert_template(merged, vector)?;
            delta.deleted_template_ids.extend(members.iter().cloned());
            delta.added_templates.push(merged_id.clone());
            delta.merge_events.push(MergeEvent {
                members,
                merged_id,
            });
        }
        Ok(())
    }

    /// Stage III after a failure.
    pub fn update_after_failure(
        &self,
        item: &QueryItem,
        outcome: &AttemptOutcome,
        memory: &mut Memory,
    ) -> Result<MemoryDelta, EngineError> {
        let mut delta = MemoryDelta::default();
        let step = memory.state.step;
        let last_reflection = outcome.reflections.last().cloned().unwrap_or_default();
        let wrong = if outcome.final_answer.trim().is_empty() {
            "(empty reply)".to_string()
        } else {
            outcome.final_answer.clone()
        };
        let bad_case = BadCase {
            question: item.prompt_text(),
            gold_answer: item.gold.clone(),
            wrong_answer: wrong,
            reflection: last_reflection.clone(),
        };
        let attempts: &[FailedAttempt] = &outcome.failed_attempts;

        let b = Bindings::new()
            .set("question", item.prompt_text())
            .set("correct_pred", format!("({})", item.gold))
            .set("failed_attempts", format_failed_attempts(attempts));
        let prompt = self.render(PromptKind::ErrorSummarize, &b)?;
        let (parsed, raw) =
            self.ask_structured(PromptKind::ErrorSummarize, prompt, parse_summary, &mut delta.transcript)?;
        let r_sum = match parsed {
            Ok(s) => s.reflection,
            Err(e) => {
                warn!(item = %item.id, error = %e, "error summary unusable; storing fallback pattern");
                let text = fallback_pattern_text(&last_reflection, &raw, item);
                self.add_pattern(&text, bad_case, memory, &mut delta)?;
                return Ok(delta);
            }
        };

        let e_sum = self.gateway.embed_one(&r_sum)?;
        let best = if memory.pattern_index().is_empty() {
            None
        } else {
            memory
                .pattern_index()
                .scores(&e_sum)?
                .into_iter()
                .filter(|h| h.score > self.params.theta_error)
                // scores come in ascending id order; keep the first of equal bests
                .fold(None, |best: Option<crate::index::ScoredHit>, h| match &best {
                    Some(b) if b.score >= h.score => best,
                    _ => Some(h),
                })
        };

        let Some(hit) = best else {
            self.insert_pattern(&r_sum, e_sum, bad_case, memory, &mut delta)?;
            return Ok(delta);
        };

        let existing = memory.state.pattern(&hit.id).expect("indexed pattern").clone();
        let b = Bindings::new()
            .set("current_pattern", existing.pattern_text.as_str())
            .set("historical_bad_cases", format_bad_cases(&existing.bad_cases))
            .set("new_question", bad_case.question.as_str())
            .set("new_ground_truth", bad_case.gold_answer.as_str())
            .set("new_wrong_pred", bad_case.wrong_answer.as_str())
            .set(
                "new_reflection",
                if bad_case.reflection.is_empty() {
                    NONE_BLOCK
                } else {
                    bad_case.reflection.as_str()
                },
            );
        let prompt = self.render(PromptKind::ErrorUpdate, &b)?;
        let (parsed, _) =
            self.ask_structured(PromptKind::ErrorUpdate, prompt, parse_pattern_update, &mut delta.transcript)?;
        let reply = match parsed {
            Ok(r) => r,
            Err(e) => {
                warn!(item = %item.id, error = %e, "pattern update unusable; adding summary as new pattern");
                self.insert_pattern(&r_sum, e_sum, bad_case, memory, &mut delta)?;
                return Ok(delta);
            }
        };
        if reply.updated && reply.pattern != existing.pattern_text {
            let v = self.gateway.embed_one(&reply.pattern)?;
            memory.set_pattern_vector(&hit.id, v)?;
            memory
                .state
                .pattern_mut(&hit.id)
                .expect("indexed pattern")
                .pattern_text = reply.pattern;
            delta.refined_patterns.push(hit.id.clone());
        }
        bad_case.validate()?;
        let p = memory.state.pattern_mut(&hit.id).expect("indexed pattern");
        p.bad_cases.push(bad_case);
        p.updated_at = step;
        delta.bad_case_appends.push(hit.id);
        Ok(delta)
    }

    fn add_pattern(
        &self,
        text: &str,
        bad_case: BadCase,
        memory: &mut Memory,
        delta: &mut MemoryDelta,
    ) -> Result<(), EngineError> {
        let v = self.gateway.embed_one(text)?;
        self.insert_pattern(text, v, bad_case, memory, delta)
    }

    fn insert_pattern(
        &self,
        text: &str,
        vector: crate::index::Embedding,
        bad_case: BadCase,
        memory: &mut Memory,
        delta: &mut MemoryDelta,
    ) -> Result<(), EngineError> {
        let p = memory.state.create_pattern(text, bad_case)?;
        delta.added_patterns.push(p.id.clone());
        memory.insert_pattern(p, vector)?;
        Ok(())
    }
}

/// Merge replies may echo ids bare ("3") as in the prompt's own example.
fn resolve_template_id(memory: &Memory, raw: &str) -> Option<String> {
    let raw = raw.trim();
    if memory.state.template(raw).is_some() {
        return Some(raw.to_string());
    }
    let bare = raw.trim_start_matches('[').trim_end_matches(']');
    if bare.chars().all(|c| c.is_ascii_digit()) && !bare.is_empty() {
        let id = format!("t-{bare}");
        if memory.state.template(&id).is_some() {
            return Some(id);
        }
    }
    None
}

fn fallback_pattern_text(last_reflection: &str, raw_reply: &str, item: &QueryItem) -> String {
    let r = last_reflection.trim();
    if !r.is_empty() && r != crate::reflection::FALLBACK_REFLECTION {
        return r.to_string();
    }
    let raw = raw_reply.trim();
    if !raw.is_empty() {
        return raw.to_string();
    }
    format!("Re-check the reasoning on questions like: {}", item.question)
}
