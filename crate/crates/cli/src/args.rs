//! Command-line surface and its merge onto [`RunConfig`].
//!
//! Each flag also reads an environment variable, so clap resolves
//! flag-over-env; the result is then laid over the config file, which is
//! laid over the defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use memapo_core::gateway::ModelPrice;
use memapo_core::RunConfig;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "memapo", version, about = "Dual-memory prompt optimizer")]
pub struct Cli {
    /// JSON config file mirroring the full run configuration.
    #[arg(long, global = true, env = "MEMAPO_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Print the effective configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train memory over one or more datasets and write a snapshot.
    Train {
        #[arg(long = "data", value_name = "PATH", num_args = 1..)]
        data: Vec<PathBuf>,
        /// Where to write the trained snapshot.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Single-pass evaluation against a frozen snapshot.
    Eval {
        #[arg(long, value_name = "PATH")]
        snapshot: Option<PathBuf>,
        #[arg(long = "data", value_name = "PATH", num_args = 1..)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Look inside a snapshot.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Check connectivity to the configured endpoints.
    #[command(subcommand)]
    Providers(ProvidersCommand),
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// One row per template and per error pattern.
    Inspect { snapshot: PathBuf },
    /// Raw snapshot JSON on standard output.
    Export { snapshot: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ProvidersCommand {
    /// One chat call and one embedding call.
    Check,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Use at most this many items from each dataset.
    #[arg(long, env = "MEMAPO_LIMIT")]
    pub limit: Option<usize>,
    /// Also write the run report as JSON here.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Replay a fixture directory (script.json) instead of calling a live endpoint.
    #[arg(long, global = true, env = "MEMAPO_SCRIPTED", value_name = "DIR")]
    pub scripted: Option<PathBuf>,
    /// Directory of `<kind>.txt` files replacing built-in meta-prompts.
    #[arg(long, global = true, env = "MEMAPO_PROMPTS_DIR", value_name = "DIR")]
    pub prompts_dir: Option<PathBuf>,

    #[arg(long, global = true, env = "MEMAPO_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, global = true, env = "MEMAPO_CHAT_MODEL")]
    pub chat_model: Option<String>,
    #[arg(long, global = true, env = "MEMAPO_EMBEDDING_MODEL")]
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, global = true, env = "MEMAPO_CREDENTIAL_ENV")]
    pub credential_env: Option<String>,
    #[arg(long, global = true, env = "MEMAPO_TIMEOUT_SECS")]
    pub timeout_secs: Option<u64>,

    /// Templates recalled per query.
    #[arg(long, global = true, env = "MEMAPO_K")]
    pub k: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_THETA_CORR_TRAIN")]
    pub theta_corr_train: Option<f64>,
    #[arg(long, global = true, env = "MEMAPO_THETA_CORR_INFER")]
    pub theta_corr_infer: Option<f64>,
    #[arg(long, global = true, env = "MEMAPO_THETA_ERROR")]
    pub theta_error: Option<f64>,
    #[arg(long, global = true, env = "MEMAPO_MAX_RETRIES")]
    pub max_retries: Option<u32>,
    #[arg(long, global = true, env = "MEMAPO_CAPACITY")]
    pub capacity: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_TARGET")]
    pub target: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_VERIFY_SAMPLES")]
    pub verify_samples: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_CASE_CAP")]
    pub case_cap: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_MIN_RETAINED")]
    pub min_retained: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "MEMAPO_MAX_INFLIGHT")]
    pub max_inflight: Option<usize>,
    /// Sampling temperature for answer generation.
    #[arg(long, global = true, env = "MEMAPO_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// Warn when the error-pattern memory grows past this size.
    #[arg(long, global = true, env = "MEMAPO_EPM_SOFT_CAP")]
    pub epm_soft_cap: Option<usize>,
    #[arg(long, global = true, env = "MEMAPO_INIT_INSTRUCTION")]
    pub init_instruction: Option<String>,
    #[arg(long, global = true, env = "MEMAPO_OUTPUT_FORMAT")]
    pub output_format: Option<String>,

    /// Price entry `MODEL=IN:OUT` in dollars per million tokens; repeatable.
    #[arg(long = "price", global = true, value_name = "MODEL=IN:OUT", value_parser = parse_price)]
    pub prices: Vec<(String, ModelPrice)>,
    /// Fail calls to models without a price entry.
    #[arg(long, global = true)]
    pub strict_pricing: bool,
}

fn parse_price(raw: &str) -> Result<(String, ModelPrice), String> {
    let (model, rates) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected MODEL=IN:OUT, got {raw:?}"))?;
    let (i, o) = rates
        .split_once(':')
        .ok_or_else(|| format!("expected IN:OUT rates, got {rates:?}"))?;
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| format!("bad price {s:?}"))
    };
    if model.trim().is_empty() {
        return Err("empty model id in price".into());
    }
    Ok((model.trim().to_string(), ModelPrice::new(num(i)?, num(o)?)))
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl Cli {
    /// Defaults, then the config file, then env/flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => load_config_file(path)?,
            None => RunConfig::default(),
        };
        let o = &self.overrides;
        let (pv, pa) = (&mut cfg.provider, &mut cfg.params);
        set!(o.base_url => pv.base_url);
        set!(o.chat_model => pv.chat_model);
        set!(o.embedding_model => pv.embedding_model);
        set!(o.credential_env => pv.credential_env);
        set!(o.timeout_secs => pv.timeout_secs);
        set!(o.k => pa.k);
        set!(o.theta_corr_train => pa.theta_corr_train);
        set!(o.theta_corr_infer => pa.theta_corr_infer);
        set!(o.theta_error => pa.theta_error);
        set!(o.max_retries => pa.max_retries);
        set!(o.capacity => pa.capacity);
        set!(o.target => pa.target);
        set!(o.verify_samples => pa.verify_samples);
        set!(o.case_cap => pa.case_cap);
        set!(o.min_retained => pa.min_retained);
        set!(o.seed => pa.seed);
        set!(o.max_inflight => pa.max_inflight);
        set!(o.temperature => pa.temperature);
        set!(o.init_instruction => pa.init_instruction);
        set!(o.output_format => pa.output_format);
        if o.epm_soft_cap.is_some() {
            pa.epm_soft_cap = o.epm_soft_cap;
        }
        for (model, price) in &o.prices {
            cfg.price_table.insert(model.clone(), *price);
        }
        if o.strict_pricing {
            cfg.strict_pricing = true;
        }
        if o.scripted.is_some() {
            cfg.paths.scripted = o.scripted.clone();
        }
        if o.prompts_dir.is_some() {
            cfg.paths.prompts_dir = o.prompts_dir.clone();
        }

        let mut run_args = |run: &RunArgs, data: &[PathBuf]| {
            if !data.is_empty() {
                cfg.paths.data = data.to_vec();
            }
            if run.limit.is_some() {
                cfg.limit = run.limit;
            }
            if run.report.is_some() {
                cfg.paths.report = run.report.clone();
            }
        };
        match &self.command {
            Some(Command::Train { data, out, run }) => {
                run_args(run, data);
                if out.is_some() {
                    cfg.paths.out = out.clone();
                }
            }
            Some(Command::Eval { snapshot, data, run }) => {
                run_args(run, data);
                if snapshot.is_some() {
                    cfg.paths.snapshot = snapshot.clone();
                }
            }
            Some(Command::Memory(MemoryCommand::Inspect { snapshot } | MemoryCommand::Export { snapshot })) => {
                cfg.paths.snapshot = Some(snapshot.clone());
            }
            Some(Command::Providers(_)) | None => {}
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
