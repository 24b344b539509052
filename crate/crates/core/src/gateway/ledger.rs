use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::Usage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("model {0:?} has no entry in the price table")]
    UnknownModel(String),
}

/// Dollars per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl ModelPrice {
    pub fn new(input_per_million: f64, output_per_million: f64) -> Self {
        Self {
            input_per_million,
            output_per_million,
        }
    }

    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        (prompt_tokens as f64 * self.input_per_million
            + completion_tokens as f64 * self.output_per_million)
            / 1e6
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelTotals {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub dollars: f64,
}

impl ModelTotals {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Per-model call, token and dollar accumulators.
///
/// Dollars are always recomputed from the token totals and the price table,
/// so they never drift from the token counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    #[serde(default)]
    pub prices: BTreeMap<String, ModelPrice>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub models: BTreeMap<String, ModelTotals>,
}

impl CostLedger {
    pub fn new(prices: BTreeMap<String, ModelPrice>, strict: bool) -> Self {
        Self {
            prices,
            strict,
            models: BTreeMap::new(),
        }
    }

    pub fn check_priced(&self, model: &str) -> Result<(), LedgerError> {
        if self.strict && !self.prices.contains_key(model) {
            return Err(LedgerError::UnknownModel(model.to_string()));
        }
        Ok(())
    }

    pub fn record(&mut self, model: &str, usage: Usage) -> Result<(), LedgerError> {
        self.check_priced(model)?;
        let price = match self.prices.get(model) {
            Some(p) => *p,
            None => {
                if !self.models.contains_key(model) {
                    warn!(model, "no price configured; costs recorded as zero");
                }
                ModelPrice::new(0.0, 0.0)
            }
        };
        let totals = self.models.entry(model.to_string()).or_default();
        totals.calls += 1;
        totals.prompt_tokens += usage.prompt_tokens;
        totals.completion_tokens += usage.completion_tokens;
        totals.dollars = price.cost(totals.prompt_tokens, totals.completion_tokens);
        Ok(())
    }

    pub fn model(&self, model: &str) -> Option<&ModelTotals> {
        self.models.get(model)
    }

    /// Sum over all models.
    pub fn totals(&self) -> ModelTotals {
        self.models
            .values()
            .fold(ModelTotals::default(), |acc, m| ModelTotals {
                calls: acc.calls + m.calls,
                prompt_tokens: acc.prompt_tokens + m.prompt_tokens,
                completion_tokens: acc.completion_tokens + m.completion_tokens,
                dollars: acc.dollars + m.dollars,
            })
    }
}
