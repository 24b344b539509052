//! Engine parameters and the full run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use std::sync::Arc;

use crate::gateway::{
    CostLedger, Gateway, GatewayError, ModelPrice, ModelProvider, OpenAiConfig, OpenAiProvider,
    RetryPolicy, ScriptedProvider,
};
use crate::memory::CaseLimits;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{field} must lie in [0, 1], got {value}")]
    OutOfRange { field: &'static str, value: String },
    #[error("{0}")]
    Invalid(String),
}

pub const DEFAULT_INIT_INSTRUCTION: &str = "Let's solve the problem";
pub const DEFAULT_OUTPUT_FORMAT: &str =
    "End your reply with a final line of the form \"Answer: (X)\", where X is the letter of the chosen option.";

/// Tunables of the retrieval, reflection and update stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    pub k: usize,
    pub theta_corr_train: f64,
    pub theta_corr_infer: f64,
    pub theta_error: f64,
    pub max_retries: u32,
    pub capacity: usize,
    pub target: usize,
    pub verify_samples: usize,
    pub case_cap: usize,
    pub min_retained: usize,
    pub seed: u64,
    pub max_inflight: usize,
    /// Sampling temperature of answer generation. Meta-operations always run at 0.
    pub temperature: f64,
    /// Warn when the EPM grows past this size. None disables the check.
    pub epm_soft_cap: Option<usize>,
    pub init_instruction: String,
    pub output_format: String,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            k: 3,
            theta_corr_train: 0.3,
            theta_corr_infer: 0.1,
            theta_error: 0.7,
            max_retries: 3,
            capacity: 30,
            target: 30,
            verify_samples: 3,
            case_cap: 20,
            min_retained: 3,
            seed: 42,
            max_inflight: 4,
            temperature: 0.0,
            epm_soft_cap: None,
            init_instruction: DEFAULT_INIT_INSTRUCTION.to_string(),
            output_format: DEFAULT_OUTPUT_FORMAT.to_string(),
        }
    }
}

fn unit(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            field,
            value: value.to_string(),
        })
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        unit("theta_corr_train", self.theta_corr_train)?;
        unit("theta_corr_infer", self.theta_corr_infer)?;
        unit("theta_error", self.theta_error)?;
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.target > self.capacity {
            return Err(ConfigError::Invalid(format!(
                "target ({}) exceeds capacity ({})",
                self.target, self.capacity
            )));
        }
        if self.case_cap == 0 {
            return Err(ConfigError::Invalid("case_cap must be at least 1".into()));
        }
        if self.max_inflight == 0 {
            return Err(ConfigError::Invalid("max_inflight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn case_limits(&self) -> CaseLimits {
        CaseLimits {
            case_cap: self.case_cap,
            min_retained: self.min_retained,
        }
    }

    /// sha256 over the canonical JSON of the parameters.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embedding_model: String,
    pub credential_env: String,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            chat_model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            credential_env: "MEMAPO_API_KEY".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub scripted: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
}

/// Everything a run needs, as read from a JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderConfig,
    pub params: EngineParams,
    /// Dollar prices per million tokens, keyed by model id.
    pub price_table: BTreeMap<String, ModelPrice>,
    /// Refuse calls to models missing from the price table.
    pub strict_pricing: bool,
    pub limit: Option<usize>,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate()?;
        for (name, v) in [
            ("provider.chat_model", &self.provider.chat_model),
            ("provider.embedding_model", &self.provider.embedding_model),
            ("provider.credential_env", &self.provider.credential_env),
        ] {
            if v.trim().is_empty() {
                return Err(ConfigError::Invalid(format!("{name} is empty")));
            }
        }
        for (model, price) in &self.price_table {
            if !(price.input_per_million >= 0.0 && price.output_per_million >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "price for {model} must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Builds the gateway this config describes: the scripted fixture when
    /// `paths.scripted` is set, otherwise the HTTP client.
    pub fn gateway(&self) -> Result<Gateway, GatewayError> {
        let (provider, retry): (Arc<dyn ModelProvider>, RetryPolicy) = match &self.paths.scripted {
            Some(dir) => {
                let p = ScriptedProvider::from_path(dir)
                    .map_err(|e| GatewayError::Fixture(format!("{}: {e}", dir.display())))?;
                (Arc::new(p), RetryPolicy::none())
            }
            None => {
                let mut cfg = OpenAiConfig::from_env(&self.provider.base_url, &self.provider.credential_env)?;
                cfg.timeout_secs = self.provider.timeout_secs;
                (Arc::new(OpenAiProvider::new(cfg)), RetryPolicy::default())
            }
        };
        Ok(Gateway::new(provider, &self.provider.chat_model, &self.provider.embedding_model)
            .with_retry(retry)
            .with_max_inflight(self.params.max_inflight)
            .with_ledger(CostLedger::new(self.price_table.clone(), self.strict_pricing)))
    }
}
