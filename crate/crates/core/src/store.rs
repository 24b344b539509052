//! Memory state paired with its embedding indexes.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::index::{Embedding, IndexError, VectorIndex};
use crate::memory::{ErrorPattern, MemoryState, Removal, Template};

/// CTM and EPM records together with the vectors they are retrieved by.
///
/// Templates are indexed by their `index_text` embedding, patterns by their
/// `pattern_text` embedding. Every record has exactly one vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memory {
    pub state: MemoryState,
    template_vectors: VectorIndex,
    pattern_vectors: VectorIndex,
}

#[derive(Serialize)]
struct HashView<'a> {
    state: &'a MemoryState,
    template_vectors: BTreeMap<&'a str, &'a [f64]>,
    pattern_vectors: BTreeMap<&'a str, &'a [f64]>,
}

fn view(index: &VectorIndex) -> BTreeMap<&str, &[f64]> {
    index
        .ids()
        .map(|id| (id, index.get(id).expect("listed id").values()))
        .collect()
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn template_index(&self) -> &VectorIndex {
        &self.template_vectors
    }

    pub fn pattern_index(&self) -> &VectorIndex {
        &self.pattern_vectors
    }

    pub fn template_vector(&self, id: &str) -> Option<&Embedding> {
        self.template_vectors.get(id)
    }

    pub fn pattern_vector(&self, id: &str) -> Option<&Embedding> {
        self.pattern_vectors.get(id)
    }

    /// Dimension shared by all stored vectors, if any are stored.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.template_vectors.dim().or(self.pattern_vectors.dim())
    }

    fn check_dim(&self, vector: &Embedding) -> Result<(), IndexError> {
        match self.embedding_dim() {
            Some(dim) if dim != vector.dim() => Err(IndexError::DimensionMismatch {
                expected: dim,
                actual: vector.dim(),
            }),
            _ => Ok(()),
        }
    }

    pub fn insert_template(&mut self, template: Template, vector: Embedding) -> Result<(), IndexError> {
        self.check_dim(&vector)?;
        self.template_vectors.upsert(template.id.clone(), vector)?;
        self.state.ctm.push(template);
        Ok(())
    }

    pub fn set_template_vector(&mut self, id: &str, vector: Embedding) -> Result<(), IndexError> {
        self.check_dim(&vector)?;
        self.template_vectors.upsert(id, vector)
    }

    pub fn remove_template(&mut self, id: &str) -> Removal<Template> {
        let removed = self.state.remove_template(id);
        if !removed.is_unknown() {
            self.template_vectors.remove(id);
        }
        removed
    }

    pub fn insert_pattern(&mut self, pattern: ErrorPattern, vector: Embedding) -> Result<(), IndexError> {
        self.check_dim(&vector)?;
        self.pattern_vectors.upsert(pattern.id.clone(), vector)?;
        self.state.epm.push(pattern);
        Ok(())
    }

    pub fn set_pattern_vector(&mut self, id: &str, vector: Embedding) -> Result<(), IndexError> {
        self.check_dim(&vector)?;
        self.pattern_vectors.upsert(id, vector)
    }

    /// sha256 over the state and every vector's exact values.
    pub fn hash(&self) -> String {
        let v = HashView {
            state: &self.state,
            template_vectors: view(&self.template_vectors),
            pattern_vectors: view(&self.pattern_vectors),
        };
        let bytes = serde_json::to_vec(&v).expect("memory serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
