//! JSONL question-answer datasets.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::reflection::QueryItem;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DatasetError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate question (first seen on line {first})")]
    DuplicateQuestion {
        path: String,
        line: usize,
        first: usize,
    },
    #[error("{path}: dataset has no items")]
    Empty { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub items: Vec<QueryItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Keeps the first `limit` items in file order.
    pub fn truncate(&mut self, limit: usize) {
        self.items.truncate(limit);
    }
}

fn text_field<'v>(obj: &'v serde_json::Map<String, Value>, names: &[&str]) -> Result<Option<&'v str>, String> {
    for name in names {
        match obj.get(*name) {
            Some(Value::String(s)) => return Ok(Some(s)),
            Some(Value::Null) | None => continue,
            Some(_) => return Err(format!("field `{name}` must be a string")),
        }
    }
    Ok(None)
}

fn parse_line(raw: &str, id: String) -> Result<QueryItem, String> {
    let value: Value = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let Value::Object(obj) = value else {
        return Err("line is not a JSON object".into());
    };
    let question = text_field(&obj, &["question"])?.ok_or("missing field `question`")?;
    let answer =
        text_field(&obj, &["answer", "correct", "label"])?.ok_or("missing field `answer`")?;
    let question = match text_field(&obj, &["passage"])? {
        Some(p) if !p.trim().is_empty() => format!("{p}\n{question}"),
        _ => question.to_string(),
    };
    let options = match obj.get("options") {
        None | Some(Value::Null) => None,
        Some(Value::Array(opts)) => Some(
            opts.iter()
                .map(|o| match o {
                    Value::String(s) => Ok(s.clone()),
                    _ => Err("`options` must be a list of strings".to_string()),
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Some(_) => return Err("`options` must be a list of strings".into()),
    };
    QueryItem::new(id, question, answer, options).map_err(|e| e.to_string())
}

/// Loads a JSONL file; any bad line fails the whole load.
///
/// Items are keyed `<file stem>:<line>`. Blank lines are skipped.
pub fn load_dataset(path: &Path, split: Split) -> Result<Dataset, DatasetError> {
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| shown.clone());
    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item = parse_line(line, format!("{name}:{line_no}")).map_err(|reason| DatasetError::Parse {
            path: shown.clone(),
            line: line_no,
            reason,
        })?;
        if let Some(first) = seen.insert(item.prompt_text(), line_no) {
            return Err(DatasetError::DuplicateQuestion {
                path: shown,
                line: line_no,
                first,
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(DatasetError::Empty { path: shown });
    }
    Ok(Dataset { name, split, items })
}
