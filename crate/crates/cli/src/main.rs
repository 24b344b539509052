//! `memapo` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration problem (including
//! unreadable inputs), 2 runtime failure after the run started.

mod args;

use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use memapo_core::gateway::{Gateway, Message};
use memapo_core::harness::{
    evaluate, load_dataset, load_memory, save_memory, train, Dataset, HarnessError, MemorySnapshot,
    RunReport, Split, SystemClock,
};
use memapo_core::prompts::PromptLibrary;
use memapo_core::{Engine, Memory, RunConfig};
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command, MemoryCommand, ProvidersCommand};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn,memapo_core=info")),
        )
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn usage(msg: &str, sub: &str) -> CliError {
    CliError::Config(format!("{msg}\n\nUsage: memapo {sub}\n\nFor more information, try '--help'."))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve()?;
    if cli.print_config {
        let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        emit(&format!("{json}\n"));
        return Ok(());
    }
    match &cli.command {
        None => Err(usage("no command given", "[OPTIONS] <COMMAND>")),
        Some(Command::Train { .. }) => cmd_train(&cfg),
        Some(Command::Eval { .. }) => cmd_eval(&cfg),
        Some(Command::Memory(MemoryCommand::Inspect { .. })) => cmd_inspect(&cfg),
        Some(Command::Memory(MemoryCommand::Export { .. })) => cmd_export(&cfg),
        Some(Command::Providers(ProvidersCommand::Check)) => cmd_check(&cfg),
    }
}

fn gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    cfg.gateway().map_err(|e| CliError::Config(e.to_string()))
}

fn prompts(cfg: &RunConfig) -> Result<PromptLibrary, CliError> {
    match &cfg.paths.prompts_dir {
        Some(dir) => PromptLibrary::with_overrides(dir).map_err(|e| CliError::Config(e.to_string())),
        None => Ok(PromptLibrary::builtin()),
    }
}

fn datasets(cfg: &RunConfig, split: Split, sub: &str) -> Result<Vec<Dataset>, CliError> {
    if cfg.paths.data.is_empty() {
        return Err(usage("at least one --data path is required", sub));
    }
    cfg.paths
        .data
        .iter()
        .map(|p| {
            let mut d = load_dataset(p, split).map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(n) = cfg.limit {
                d.truncate(n);
            }
            Ok(d)
        })
        .collect()
}

fn write_report(report: &RunReport, path: Option<&PathBuf>) -> Result<(), CliError> {
    emit(&report.render_table());
    if let Some(path) = path {
        std::fs::write(path, report.to_json())
            .map_err(|e| CliError::Runtime(format!("cannot write report {}: {e}", path.display())))?;
    }
    Ok(())
}

// every harness error is a problem with the inputs, not a mid-run abort
fn harness_error(e: HarnessError) -> CliError {
    CliError::Config(e.to_string())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    const SUB: &str = "train --data <PATH>... --out <PATH>";
    let out = cfg
        .paths
        .out
        .clone()
        .ok_or_else(|| usage("the --out path is required", SUB))?;
    let data = datasets(cfg, Split::Train, SUB)?;
    let gateway = gateway(cfg)?;
    let prompts = prompts(cfg)?;
    let engine = Engine::new(&gateway, &prompts, &cfg.params);
    let (memory, report) = train(&data, engine, Memory::new(), &SystemClock::new()).map_err(harness_error)?;
    let snapshot = MemorySnapshot::from_memory(&memory, gateway.embedding_model(), &cfg.params.fingerprint());
    save_memory(&snapshot, &out).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_report(&report, cfg.paths.report.as_ref())?;
    eprintln!("snapshot written to {}", out.display());
    Ok(())
}

fn snapshot_path<'a>(cfg: &'a RunConfig, sub: &str) -> Result<&'a Path, CliError> {
    cfg.paths
        .snapshot
        .as_deref()
        .ok_or_else(|| usage("a snapshot path is required", sub))
}

fn load(path: &Path) -> Result<MemorySnapshot, CliError> {
    load_memory(path).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    const SUB: &str = "eval --snapshot <PATH> --data <PATH>...";
    let snapshot = load(snapshot_path(cfg, SUB)?)?;
    let data = datasets(cfg, Split::Test, SUB)?;
    let gateway = gateway(cfg)?;
    let prompts = prompts(cfg)?;
    let engine = Engine::new(&gateway, &prompts, &cfg.params);
    let report = evaluate(&data, &snapshot, engine, &SystemClock::new()).map_err(harness_error)?;
    write_report(&report, cfg.paths.report.as_ref())
}

fn one_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\t', " ")
}

fn cmd_inspect(cfg: &RunConfig) -> Result<(), CliError> {
    let snapshot = load(snapshot_path(cfg, "memory inspect <SNAPSHOT>")?)?;
    snapshot.to_memory().map_err(|e| CliError::Config(e.to_string()))?;
    let mut out = String::new();
    for t in &snapshot.templates {
        out.push_str(&format!(
            "{}\tcases={}\t{}\t{}\n",
            t.id,
            t.cases.len(),
            one_line(&t.index_text),
            one_line(&t.strategy_text)
        ));
    }
    for p in &snapshot.error_patterns {
        out.push_str(&format!("{}\tbad_cases={}\t{}\n", p.id, p.bad_cases.len(), one_line(&p.pattern_text)));
    }
    emit(&out);
    Ok(())
}

fn cmd_export(cfg: &RunConfig) -> Result<(), CliError> {
    let snapshot = load(snapshot_path(cfg, "memory export <SNAPSHOT>")?)?;
    snapshot.to_memory().map_err(|e| CliError::Config(e.to_string()))?;
    emit(&snapshot.to_json());
    Ok(())
}

fn cmd_check(cfg: &RunConfig) -> Result<(), CliError> {
    let gateway = gateway(cfg)?;
    let mut failed = false;
    match gateway.chat(vec![Message::user("Reply with the single word OK.")], 0.0) {
        Ok(r) => emit(&format!("chat {} ok: {:?}\n", gateway.chat_model(), r.text.trim())),
        Err(e) => {
            emit(&format!("chat {} FAILED: {e}\n", gateway.chat_model()));
            failed = true;
        }
    }
    match gateway.embed_one("ping") {
        Ok(v) => emit(&format!("embeddings {} ok: dim {}\n", gateway.embedding_model(), v.dim())),
        Err(e) => {
            emit(&format!("embeddings {} FAILED: {e}\n", gateway.embedding_model()));
            failed = true;
        }
    }
    if failed {
        return Err(CliError::Runtime("provider check failed".into()));
    }
    Ok(())
}
