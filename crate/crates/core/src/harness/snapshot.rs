//! Durable, self-describing JSON image of the dual memory.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::Embedding;
use crate::memory::{BadCase, Case, CaseLimits, ErrorPattern, MemoryState, Template};
use crate::store::Memory;

pub const FORMAT_VERSION: u32 = 1;
pub const SNAPSHOT_EXTENSION: &str = ".memapo.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("snapshot I/O on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("snapshot format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionUnsupported { found: u64 },
    #[error("snapshot integrity: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub id: String,
    pub index_text: String,
    pub strategy_text: String,
    pub cases: Vec<Case>,
    pub created_at: u64,
    pub updated_at: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternRecord {
    pub id: String,
    pub pattern_text: String,
    pub bad_cases: Vec<BadCase>,
    pub created_at: u64,
    pub updated_at: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySnapshot {
    pub format_version: u32,
    pub embedding_model: String,
    /// Zero when memory holds no vectors yet.
    pub embedding_dim: usize,
    pub config_fingerprint: String,
    pub step: u64,
    pub next_template_id: u64,
    pub next_pattern_id: u64,
    pub templates: Vec<TemplateRecord>,
    pub error_patterns: Vec<PatternRecord>,
}

fn integrity(msg: impl Into<String>) -> SnapshotError {
    SnapshotError::Integrity(msg.into())
}

fn check_id(id: &str, prefix: &str, next: u64, seen: &mut BTreeSet<String>) -> Result<(), SnapshotError> {
    let n: u64 = id
        .strip_prefix(prefix)
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| integrity(format!("malformed id `{id}`")))?;
    if n == 0 || n >= next {
        return Err(integrity(format!("id `{id}` is outside the allocated range")));
    }
    if !seen.insert(id.to_string()) {
        return Err(integrity(format!("duplicate id `{id}`")));
    }
    Ok(())
}

impl MemorySnapshot {
    pub fn from_memory(memory: &Memory, embedding_model: &str, config_fingerprint: &str) -> Self {
        let state = &memory.state;
        let vector = |v: Option<&Embedding>| v.expect("every record has a vector").values().to_vec();
        Self {
            format_version: FORMAT_VERSION,
            embedding_model: embedding_model.to_string(),
            embedding_dim: memory.embedding_dim().unwrap_or(0),
            config_fingerprint: config_fingerprint.to_string(),
            step: state.step,
            next_template_id: state.next_template_id,
            next_pattern_id: state.next_pattern_id,
            templates: state
                .ctm
                .iter()
                .map(|t| TemplateRecord {
                    id: t.id.clone(),
                    index_text: t.index_text.clone(),
                    strategy_text: t.strategy_text.clone(),
                    cases: t.cases.clone(),
                    created_at: t.created_at,
                    updated_at: t.updated_at,
                    vector: vector(memory.template_vector(&t.id)),
                })
                .collect(),
            error_patterns: state
                .epm
                .iter()
                .map(|p| PatternRecord {
                    id: p.id.clone(),
                    pattern_text: p.pattern_text.clone(),
                    bad_cases: p.bad_cases.clone(),
                    created_at: p.created_at,
                    updated_at: p.updated_at,
                    vector: vector(memory.pattern_vector(&p.id)),
                })
                .collect(),
        }
    }

    /// Rebuilds memory, checking dimensions, ids and record contents.
    pub fn to_memory(&self) -> Result<Memory, SnapshotError> {
        if self.format_version != FORMAT_VERSION {
            return Err(SnapshotError::VersionUnsupported {
                found: self.format_version.into(),
            });
        }
        let records = self.templates.len() + self.error_patterns.len();
        if records > 0 && self.embedding_dim == 0 {
            return Err(integrity("records present but embedding_dim is 0"));
        }
        let mut memory = Memory::new();
        memory.state = MemoryState {
            ctm: Vec::new(),
            epm: Vec::new(),
            step: self.step,
            next_template_id: self.next_template_id,
            next_pattern_id: self.next_pattern_id,
        };
        let embedding = |id: &str, v: &[f64]| -> Result<Embedding, SnapshotError> {
            if v.len() != self.embedding_dim {
                return Err(integrity(format!(
                    "vector of `{id}` has dimension {}, expected {}",
                    v.len(),
                    self.embedding_dim
                )));
            }
            Embedding::new(v.to_vec()).map_err(|e| integrity(format!("vector of `{id}`: {e}")))
        };
        let lenient = CaseLimits {
            case_cap: usize::MAX,
            min_retained: 0,
        };
        let mut seen = BTreeSet::new();
        for r in &self.templates {
            check_id(&r.id, "t-", self.next_template_id, &mut seen)?;
            let t = Template {
                id: r.id.clone(),
                index_text: r.index_text.clone(),
                strategy_text: r.strategy_text.clone(),
                cases: r.cases.clone(),
                created_at: r.created_at,
                updated_at: r.updated_at,
            };
            t.validate(lenient)
                .map_err(|e| integrity(format!("template `{}`: {e}", r.id)))?;
            let v = embedding(&r.id, &r.vector)?;
            memory
                .insert_template(t, v)
                .map_err(|e| integrity(format!("template `{}`: {e}", r.id)))?;
        }
        for r in &self.error_patterns {
            check_id(&r.id, "e-", self.next_pattern_id, &mut seen)?;
            let p = ErrorPattern {
                id: r.id.clone(),
                pattern_text: r.pattern_text.clone(),
                bad_cases: r.bad_cases.clone(),
                created_at: r.created_at,
                updated_at: r.updated_at,
            };
            p.validate()
                .map_err(|e| integrity(format!("pattern `{}`: {e}", r.id)))?;
            let v = embedding(&r.id, &r.vector)?;
            memory
                .insert_pattern(p, v)
                .map_err(|e| integrity(format!("pattern `{}`: {e}", r.id)))?;
        }
        Ok(memory)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("snapshot serializes");
        s.push('\n');
        s
    }

    /// Parses and fully validates a snapshot document.
    pub fn from_json(raw: &str) -> Result<Self, SnapshotError> {
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| integrity(format!("not a snapshot document: {e}")))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(SnapshotError::VersionUnsupported { found: v }),
            None => return Err(integrity("missing format_version")),
        }
        let snap: Self = serde_json::from_value(value).map_err(|e| integrity(e.to_string()))?;
        snap.to_memory()?;
        Ok(snap)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_memory(snapshot: &MemorySnapshot, path: &Path) -> Result<(), SnapshotError> {
    let io = |e: std::io::Error| SnapshotError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(snapshot.to_json().as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<MemorySnapshot, SnapshotError> {
    let raw = std::fs::read_to_string(path).map_err(|e| SnapshotError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    MemorySnapshot::from_json(&raw)
}
