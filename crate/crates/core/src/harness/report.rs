//! Run reports: accuracy, item records, costs and memory stats.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::gateway::{CostLedger, ModelTotals};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub dataset: String,
    pub predicted: Option<String>,
    pub gold: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts_used: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub templates: usize,
    pub patterns: usize,
    pub merges: usize,
    pub verification_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub models: BTreeMap<String, ModelTotals>,
    pub total: ModelTotals,
}

impl From<&CostLedger> for CostReport {
    fn from(l: &CostLedger) -> Self {
        Self {
            models: l.models.clone(),
            total: l.totals(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: RunKind,
    pub datasets: Vec<DatasetAccuracy>,
    pub items: Vec<ItemRecord>,
    pub costs: CostReport,
    pub memory: MemoryStats,
    pub wall_time_secs: f64,
}

/// Per-dataset accuracy in order of first appearance.
pub fn accuracy_by_dataset(items: &[ItemRecord]) -> Vec<DatasetAccuracy> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in items {
        if !counts.contains_key(&r.dataset) {
            order.push(r.dataset.clone());
        }
        let c = counts.entry(r.dataset.clone()).or_default();
        c.1 += 1;
        if r.correct {
            c.0 += 1;
        }
    }
    order
        .into_iter()
        .map(|name| {
            let (correct, total) = counts[&name];
            DatasetAccuracy {
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                name,
                correct,
                total,
            }
        })
        .collect()
}

impl RunReport {
    pub fn new(
        kind: RunKind,
        items: Vec<ItemRecord>,
        ledger: &CostLedger,
        memory: MemoryStats,
        wall_time_secs: f64,
    ) -> Self {
        Self {
            kind,
            datasets: accuracy_by_dataset(&items),
            items,
            costs: ledger.into(),
            memory,
            wall_time_secs,
        }
    }

    /// Accuracy over every item of the run.
    pub fn accuracy(&self) -> f64 {
        let total = self.items.len();
        if total == 0 {
            return 0.0;
        }
        self.items.iter().filter(|r| r.correct).count() as f64 / total as f64
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Human-readable summary.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<32} {:>8} {:>8} {:>9}", "dataset", "correct", "total", "accuracy");
        for d in &self.datasets {
            let _ = writeln!(out, "{:<32} {:>8} {:>8} {:>9.3}", d.name, d.correct, d.total, d.accuracy);
        }
        let _ = writeln!(out, "accuracy {:.3}", self.accuracy());
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<32} {:>8} {:>14} {:>14} {:>12}",
            "model", "calls", "prompt_tok", "complete_tok", "dollars"
        );
        let row = |out: &mut String, name: &str, m: &ModelTotals| {
            let _ = writeln!(
                out,
                "{:<32} {:>8} {:>14} {:>14} {:>12.6}",
                name, m.calls, m.prompt_tokens, m.completion_tokens, m.dollars
            );
        };
        for (name, m) in &self.costs.models {
            row(&mut out, name, m);
        }
        row(&mut out, "total", &self.costs.total);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "memory: {} templates, {} patterns, {} merges, {} verification failures",
            self.memory.templates, self.memory.patterns, self.memory.merges, self.memory.verification_failures
        );
        let _ = writeln!(out, "wall time {:.2}s", self.wall_time_secs);
        out
    }
}
