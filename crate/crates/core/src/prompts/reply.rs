//! Structured reply extraction and schema validation.
//!
//! Extraction is tolerant: the first balanced `{...}` that parses as a JSON
//! object wins, wherever it sits in the reply. Validation is strict: unknown
//! fields, missing fields and bad ids are all schema violations.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Map, Value};

use super::{CodecError, PromptKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectReply {
    pub analysis: String,
    pub reflection: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreateReply {
    pub when_to_use: String,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateAction {
    None {
        template_id: String,
    },
    Update {
        template_id: String,
        when_to_use: Option<String>,
        strategy: Option<String>,
    },
    Delete {
        template_id: String,
    },
    Add {
        when_to_use: String,
        strategy: String,
    },
}

impl TemplateAction {
    pub fn template_id(&self) -> Option<&str> {
        match self {
            TemplateAction::None { template_id }
            | TemplateAction::Update { template_id, .. }
            | TemplateAction::Delete { template_id } => Some(template_id),
            TemplateAction::Add { .. } => None,
        }
    }

    pub fn verb(&self) -> &'static str {
        match self {
            TemplateAction::None { .. } => "none",
            TemplateAction::Update { .. } => "update",
            TemplateAction::Delete { .. } => "delete",
            TemplateAction::Add { .. } => "add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActionPlan {
    pub actions: Vec<TemplateAction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeGroup {
    pub template_ids: Vec<String>,
    pub reason: String,
    pub merged_when_to_use: String,
    pub merged_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergePlan {
    pub merge_groups: Vec<MergeGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryReply {
    pub root_cause: String,
    pub reflection: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternUpdateReply {
    pub analysis: String,
    pub updated: bool,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StructuredReply {
    Reflect(ReflectReply),
    TemplateCreate(CreateReply),
    TemplateUpdate(ActionPlan),
    TemplateMerge(MergePlan),
    ErrorSummarize(SummaryReply),
    ErrorUpdate(PatternUpdateReply),
}

impl StructuredReply {
    pub fn kind(&self) -> PromptKind {
        match self {
            StructuredReply::Reflect(_) => PromptKind::Reflect,
            StructuredReply::TemplateCreate(_) => PromptKind::TemplateCreate,
            StructuredReply::TemplateUpdate(_) => PromptKind::TemplateUpdate,
            StructuredReply::TemplateMerge(_) => PromptKind::TemplateMerge,
            StructuredReply::ErrorSummarize(_) => PromptKind::ErrorSummarize,
            StructuredReply::ErrorUpdate(_) => PromptKind::ErrorUpdate,
        }
    }

    /// The JSON object a well-behaved model would send for this reply.
    pub fn to_json(&self) -> Value {
        match self {
            StructuredReply::Reflect(r) => {
                json!({"analysis": r.analysis, "reflection": r.reflection})
            }
            StructuredReply::TemplateCreate(r) => {
                json!({"when_to_use": r.when_to_use, "strategy": r.strategy})
            }
            StructuredReply::TemplateUpdate(plan) => {
                let actions: Vec<Value> = plan
                    .actions
                    .iter()
                    .map(|a| match a {
                        TemplateAction::None { template_id } => {
                            json!({"action": "none", "template_id": template_id})
                        }
                        TemplateAction::Update {
                            template_id,
                            when_to_use,
                            strategy,
                        } => json!({
                            "action": "update",
                            "template_id": template_id,
                            "when_to_use": when_to_use,
                            "strategy": strategy,
                        }),
                        TemplateAction::Delete { template_id } => {
                            json!({"action": "delete", "template_id": template_id})
                        }
                        TemplateAction::Add {
                            when_to_use,
                            strategy,
                        } => json!({"action": "add", "when_to_use": when_to_use, "strategy": strategy}),
                    })
                    .collect();
                json!({ "actions": actions })
            }
            StructuredReply::TemplateMerge(plan) => {
                let groups: Vec<Value> = plan
                    .merge_groups
                    .iter()
                    .map(|g| {
                        json!({
                            "template_ids": g.template_ids,
                            "reason": g.reason,
                            "merged_when_to_use": g.merged_when_to_use,
                            "merged_strategy": g.merged_strategy,
                        })
                    })
                    .collect();
                json!({ "merge_groups": groups })
            }
            StructuredReply::ErrorSummarize(r) => {
                json!({"root_cause": r.root_cause, "reflection": r.reflection})
            }
            StructuredReply::ErrorUpdate(r) => {
                json!({"analysis": r.analysis, "updated": r.updated, "pattern": r.pattern})
            }
        }
    }

    pub fn to_json_string(&self) -> String {
        self.to_json().to_string()
    }
}

/// End offset (exclusive) of the balanced object opening at `start`.
fn balanced_end(s: &str, start: usize) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Inserts commas models drop between members, e.g. after a value line
/// copied from a prompt example that itself lacks one. In valid JSON a string
/// can only follow `{`, `[`, `,` or `:`, so anything else marks a gap.
fn repair_missing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    let mut in_str = false;
    let mut escaped = false;
    let mut last_sig: Option<char> = None;
    for c in s.chars() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
                last_sig = Some('"');
            }
            continue;
        }
        if c == '"' {
            if let Some(prev) = last_sig {
                if !matches!(prev, '{' | '[' | ',' | ':') {
                    out.push(',');
                }
            }
            in_str = true;
        }
        if !c.is_whitespace() && c != '"' {
            last_sig = Some(c);
        }
        out.push(c);
    }
    out
}

/// The first balanced JSON object in `reply`, ignoring prose and fences.
pub fn extract_json_object(reply: &str) -> Result<Map<String, Value>, CodecError> {
    for (start, _) in reply.match_indices('{') {
        let Some(end) = balanced_end(reply, start) else {
            continue;
        };
        let candidate = &reply[start..end];
        let parsed = serde_json::from_str::<Value>(candidate)
            .or_else(|_| serde_json::from_str::<Value>(&repair_missing_commas(candidate)));
        if let Ok(Value::Object(map)) = parsed {
            return Ok(map);
        }
    }
    Err(CodecError::NoJsonFound)
}

struct Fields<'a> {
    kind: PromptKind,
    map: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn new(
        kind: PromptKind,
        map: &'a Map<String, Value>,
        allowed: &[&str],
    ) -> Result<Self, CodecError> {
        if let Some(k) = map.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(violation(kind, format!("unexpected field `{k}`")));
        }
        Ok(Self { kind, map })
    }

    fn string(&self, name: &str) -> Result<String, CodecError> {
        match self.map.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(violation(self.kind, format!("`{name}` must be a string"))),
            None => Err(violation(self.kind, format!("missing field `{name}`"))),
        }
    }

    fn text(&self, name: &str) -> Result<String, CodecError> {
        let s = self.string(name)?;
        if s.trim().is_empty() {
            return Err(violation(self.kind, format!("`{name}` is empty")));
        }
        Ok(s)
    }

    /// Absent and null both mean "keep unchanged".
    fn optional_text(&self, name: &str) -> Result<Option<String>, CodecError> {
        match self.map.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(Some(s.clone())),
            Some(Value::String(_)) => Err(violation(self.kind, format!("`{name}` is empty"))),
            Some(_) => Err(violation(
                self.kind,
                format!("`{name}` must be a string or null"),
            )),
        }
    }

    fn must_be_null(&self, name: &str, verb: &str) -> Result<(), CodecError> {
        match self.map.get(name) {
            None | Some(Value::Null) => Ok(()),
            Some(_) => Err(violation(
                self.kind,
                format!("`{verb}` action must not carry `{name}`"),
            )),
        }
    }
}

fn violation(kind: PromptKind, reason: impl Into<String>) -> CodecError {
    CodecError::SchemaViolation {
        kind,
        reason: reason.into(),
    }
}

pub fn parse_reflect(reply: &str) -> Result<ReflectReply, CodecError> {
    let map = extract_json_object(reply)?;
    let f = Fields::new(PromptKind::Reflect, &map, &["analysis", "reflection"])?;
    Ok(ReflectReply {
        analysis: f.string("analysis")?,
        reflection: f.text("reflection")?,
    })
}

pub fn parse_create(reply: &str) -> Result<CreateReply, CodecError> {
    let map = extract_json_object(reply)?;
    let f = Fields::new(PromptKind::TemplateCreate, &map, &["when_to_use", "strategy"])?;
    Ok(CreateReply {
        when_to_use: f.text("when_to_use")?,
        strategy: f.text("strategy")?,
    })
}

pub fn parse_summary(reply: &str) -> Result<SummaryReply, CodecError> {
    let map = extract_json_object(reply)?;
    let f = Fields::new(PromptKind::ErrorSummarize, &map, &["root_cause", "reflection"])?;
    Ok(SummaryReply {
        root_cause: f.string("root_cause")?,
        reflection: f.text("reflection")?,
    })
}

pub fn parse_pattern_update(reply: &str) -> Result<PatternUpdateReply, CodecError> {
    let kind = PromptKind::ErrorUpdate;
    let map = extract_json_object(reply)?;
    let f = Fields::new(kind, &map, &["analysis", "updated", "pattern"])?;
    let updated = match map.get("updated") {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("true") => true,
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("false") => false,
        Some(_) => return Err(violation(kind, "`updated` must be true or false")),
        None => return Err(violation(kind, "missing field `updated`")),
    };
    Ok(PatternUpdateReply {
        analysis: f.string("analysis")?,
        updated,
        pattern: f.text("pattern")?,
    })
}

fn id_value(kind: PromptKind, v: &Value) -> Result<String, CodecError> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(violation(kind, "template ids must be non-empty strings")),
    }
}

/// Parses a template action plan and checks that every id in `recalled`
/// is targeted exactly once by a none/update/delete action.
pub fn parse_action_plan(reply: &str, recalled: &[String]) -> Result<ActionPlan, CodecError> {
    let kind = PromptKind::TemplateUpdate;
    let map = extract_json_object(reply)?;
    Fields::new(kind, &map, &["actions"])?;
    let Some(Value::Array(items)) = map.get("actions") else {
        return Err(violation(kind, "`actions` must be a list"));
    };

    let mut actions = Vec::with_capacity(items.len());
    for item in items {
        let Value::Object(obj) = item else {
            return Err(violation(kind, "each action must be an object"));
        };
        let f = Fields::new(
            kind,
            obj,
            &["action", "template_id", "when_to_use", "strategy"],
        )?;
        let verb = f.string("action")?.trim().to_ascii_lowercase();
        let template_id = || -> Result<String, CodecError> {
            match obj.get("template_id") {
                Some(v) => id_value(kind, v),
                None => Err(violation(kind, format!("`{verb}` action needs template_id"))),
            }
        };
        let action = match verb.as_str() {
            "none" | "delete" => {
                f.must_be_null("when_to_use", &verb)?;
                f.must_be_null("strategy", &verb)?;
                let template_id = template_id()?;
                if verb == "none" {
                    TemplateAction::None { template_id }
                } else {
                    TemplateAction::Delete { template_id }
                }
            }
            "update" => TemplateAction::Update {
                template_id: template_id()?,
                when_to_use: f.optional_text("when_to_use")?,
                strategy: f.optional_text("strategy")?,
            },
            "add" => {
                f.must_be_null("template_id", "add")?;
                TemplateAction::Add {
                    when_to_use: f.text("when_to_use")?,
                    strategy: f.text("strategy")?,
                }
            }
            other => return Err(violation(kind, format!("unknown action `{other}`"))),
        };
        actions.push(action);
    }

    let recalled_set: BTreeSet<&str> = recalled.iter().map(String::as_str).collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &actions {
        if let Some(id) = a.template_id() {
            if !recalled_set.contains(id) {
                return Err(violation(kind, format!("template_id `{id}` was not recalled")));
            }
            *seen.entry(id).or_default() += 1;
        }
    }
    if let Some((id, n)) = seen.iter().find(|(_, n)| **n > 1) {
        return Err(violation(kind, format!("template_id `{id}` appears {n} times")));
    }
    if let Some(missing) = recalled_set.iter().find(|id| !seen.contains_key(*id)) {
        return Err(violation(kind, format!("recalled template `{missing}` has no action")));
    }
    Ok(ActionPlan { actions })
}

/// Parses a merge plan. Id validity against the live library is checked
/// when the plan is applied.
pub fn parse_merge_plan(reply: &str) -> Result<MergePlan, CodecError> {
    let kind = PromptKind::TemplateMerge;
    let map = extract_json_object(reply)?;
    Fields::new(kind, &map, &["merge_groups"])?;
    let Some(Value::Array(items)) = map.get("merge_groups") else {
        return Err(violation(kind, "`merge_groups` must be a list"));
    };
    let mut merge_groups = Vec::with_capacity(items.len());
    for item in items {
        let Value::Object(obj) = item else {
            return Err(violation(kind, "each merge group must be an object"));
        };
        let f = Fields::new(
            kind,
            obj,
            &["template_ids", "reason", "merged_when_to_use", "merged_strategy"],
        )?;
        let Some(Value::Array(ids)) = obj.get("template_ids") else {
            return Err(violation(kind, "`template_ids` must be a list"));
        };
        let template_ids = ids
            .iter()
            .map(|v| id_value(kind, v))
            .collect::<Result<Vec<_>, _>>()?;
        merge_groups.push(MergeGroup {
            template_ids,
            reason: f.string("reason")?,
            merged_when_to_use: f.text("merged_when_to_use")?,
            merged_strategy: f.text("merged_strategy")?,
        });
    }
    Ok(MergePlan { merge_groups })
}

/// Parses `reply` for `kind`; `recalled` is only used by TemplateUpdate.
pub fn parse(kind: PromptKind, reply: &str, recalled: &[String]) -> Result<StructuredReply, CodecError> {
    Ok(match kind {
        PromptKind::Answer => return Err(CodecError::Unstructured { kind }),
        PromptKind::Reflect => StructuredReply::Reflect(parse_reflect(reply)?),
        PromptKind::TemplateCreate => StructuredReply::TemplateCreate(parse_create(reply)?),
        PromptKind::TemplateUpdate => {
            StructuredReply::TemplateUpdate(parse_action_plan(reply, recalled)?)
        }
        PromptKind::TemplateMerge => StructuredReply::TemplateMerge(parse_merge_plan(reply)?),
        PromptKind::ErrorSummarize => StructuredReply::ErrorSummarize(parse_summary(reply)?),
        PromptKind::ErrorUpdate => StructuredReply::ErrorUpdate(parse_pattern_update(reply)?),
    })
}
