//! Exact cosine-similarity index.
//!
//! Memory holds a few dozen templates at most, so retrieval is a linear scan
//! over every stored vector. Results are ordered by score descending with
//! ties broken by ascending id, which keeps replays deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector is empty")]
    Empty,
    #[error("vector contains a non-finite entry at position {0}")]
    NonFinite(usize),
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, IndexError> {
        if values.is_empty() {
            return Err(IndexError::Empty);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = IndexError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroNorm);
    }
    Ok(cosine_with_norms(a.values(), na, b.values(), nb))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    vector: Embedding,
    norm: f64,
}

/// Id-keyed store of embeddings sharing one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorIndex {
    dim: Option<usize>,
    entries: BTreeMap<String, Entry>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dimension fixed by the first inserted vector; released once the
    /// index is emptied again.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.entries.get(id).map(|e| &e.vector)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Inserts or replaces the vector stored under `id`.
    pub fn upsert(&mut self, id: impl Into<String>, vector: Embedding) -> Result<(), IndexError> {
        if let Some(dim) = self.dim {
            if vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    actual: vector.dim(),
                });
            }
        }
        let norm = vector.norm();
        if norm == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        self.dim = Some(vector.dim());
        self.entries.insert(id.into(), Entry { vector, norm });
        Ok(())
    }

    /// Removes `id`; returns false (and logs) if it was not present.
    pub fn remove(&mut self, id: &str) -> bool {
        let removed = self.entries.remove(id).is_some();
        if self.entries.is_empty() {
            self.dim = None;
        }
        if !removed {
            warn!(id, "vector index: remove of unknown id");
        }
        removed
    }

    /// Scores every stored vector against `query`.
    pub fn scores(&self, query: &Embedding) -> Result<Vec<ScoredHit>, IndexError> {
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        if let Some(dim) = self.dim {
            if query.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    actual: query.dim(),
                });
            }
        }
        Ok(self
            .entries
            .iter()
            .map(|(id, e)| ScoredHit {
                id: id.clone(),
                score: cosine_with_norms(e.vector.values(), e.norm, query.values(), qn),
            })
            .collect())
    }

    /// Up to `k` hits with `score >= threshold`, best first, ties by id.
    pub fn top_k(
        &self,
        query: &Embedding,
        k: usize,
        threshold: f64,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        let mut hits: Vec<ScoredHit> = self
            .scores(query)?
            .into_iter()
            .filter(|h| h.score >= threshold)
            .collect();
        // entries iterate in ascending id order and the sort is stable
        hits.sort_by(|a, b| b.score.total_cmp(&a.score));
        hits.truncate(k);
        Ok(hits)
    }
}
