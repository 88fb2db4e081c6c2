//! Command-line front end for the card pipeline.
//!
//! Exit codes: 0 success, 1 abort or unreadable input, 2 partial success
//! (some fields or records failed), 3 configuration error, 64 usage error.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use cardforge_core::schema::CardKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{build_gateway, Overrides, PipelineConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ABORT: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Finished, but some per-field or per-record work failed.
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable, missing, or malformed input; or an I/O failure.
    Input,
    Config,
    /// A fatal gateway error or an internal inconsistency.
    Abort,
    Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    pub fn abort(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Abort,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Input | ErrorKind::Abort => EXIT_ABORT,
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Usage => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "cardforge", version, about = "Generate, enrich, score and evaluate model and data cards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// Pipeline config JSON (gateway, extraction, enrichment, pool, judge sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scripted responses (JSONL); replaces the live gateway entirely.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a Markdown paper (plus optional repository metadata) into JSONL.
    Ingest {
        paper: PathBuf,
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract a card from a paper, then fill gaps from a pool if given.
    Generate {
        paper: PathBuf,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        kind: CardKind,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        r_max: Option<u32>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Fill missing fields of an existing card from a pool.
    Enrich {
        card: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Print the completeness index of each card.
    Wcci {
        #[arg(required = true)]
        cards: Vec<PathBuf>,
    },
    /// Pool construction and inspection.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Score cards of several methods with one or more judges.
    Evaluate {
        /// NAME=DIR, where DIR holds one card JSON file per card.
        #[arg(long = "method", required = true, value_parser = parse_method)]
        methods: Vec<(String, PathBuf)>,
        /// JSON object mapping card id to {"paper": ..., "metadata": ...}.
        #[arg(long)]
        sources: PathBuf,
        /// Judge backed by the gateway section of this config.
        #[arg(long = "judge-config")]
        judge_configs: Vec<PathBuf>,
        /// Judge backed by this mock script.
        #[arg(long = "judge-script")]
        judge_scripts: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize extraction and enrichment trace files.
    TraceStats {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    /// Filter candidate entries into a pool.
    Build {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        min_downloads: Option<u64>,
    },
    /// List paper-linked hub records and structure them into candidates.
    Fetch {
        #[arg(long)]
        kind: CardKind,
        #[arg(long, default_value = "https://huggingface.co")]
        hub_url: String,
        #[arg(long = "filter")]
        filters: Vec<String>,
        /// Total listing pages across all filters.
        #[arg(long, default_value_t = 1)]
        pages: usize,
        #[arg(long, default_value_t = 100)]
        page_size: usize,
        /// Save every listing response here.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Serve listing responses from a recording instead of the network.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Size, completeness quartiles, tag frequencies and correlations.
    Stats {
        pool: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_tags: usize,
    },
}

fn parse_method(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.trim().is_empty() && !dir.is_empty() => {
            Ok((name.trim().to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected NAME=DIR, got `{s}`")),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finish<T: Serialize>((summary, status): (T, Status)) -> Result<i32, CliError> {
    print_json(&summary);
    Ok(match status {
        Status::Ok => EXIT_OK,
        Status::Partial => EXIT_PARTIAL,
    })
}

pub fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Ingest { paper, metadata, out } => {
            let doc = cmd_ingest(&paper, metadata.as_deref())?;
            write_or_print(out.as_deref(), &doc.to_jsonl())?;
            Ok(EXIT_OK)
        }
        Command::Generate {
            paper,
            metadata,
            kind,
            id,
            pool,
            out,
            gateway,
            r_max,
            alpha,
            top_k,
        } => finish(cmd_generate(&GenerateArgs {
            paper,
            metadata,
            kind,
            id,
            config: gateway.config,
            overrides: Overrides {
                r_max,
                alpha,
                top_k,
                rounds: None,
            },
            pool,
            mock_script: gateway.mock_script,
            out,
        })?),
        Command::Enrich {
            card,
            pool,
            out,
            gateway,
            alpha,
            top_k,
        } => finish(cmd_enrich(&EnrichArgs {
            card,
            pool,
            config: gateway.config,
            overrides: Overrides {
                alpha,
                top_k,
                ..Overrides::default()
            },
            mock_script: gateway.mock_script,
            out,
        })?),
        Command::Wcci { cards } => {
            print_json(&cmd_wcci(&cards)?);
            Ok(EXIT_OK)
        }
        Command::Pool { command } => match command {
            PoolCommand::Build {
                inputs,
                out,
                config,
                percentile,
                min_downloads,
            } => {
                print_json(&cmd_pool_build(&inputs, &out, config.as_deref(), percentile, min_downloads)?);
                Ok(EXIT_OK)
            }
            PoolCommand::Fetch {
                kind,
                hub_url,
                filters,
                pages,
                page_size,
                record,
                replay,
                out,
                gateway,
            } => finish(cmd_pool_fetch(&FetchArgs {
                kind,
                hub_url,
                filters,
                pages,
                page_size,
                record_dir: record,
                replay_dir: replay,
                config: gateway.config,
                mock_script: gateway.mock_script,
                out,
            })?),
            PoolCommand::Stats { pool, top_tags } => {
                print_json(&cmd_pool_stats(&pool, top_tags)?);
                Ok(EXIT_OK)
            }
        },
        Command::Evaluate {
            methods,
            sources,
            judge_configs,
            judge_scripts,
            config,
            rounds,
            seed,
            out,
        } => {
            let (report, status) = cmd_evaluate(&EvaluateArgs {
                methods,
                sources,
                judge_configs,
                judge_scripts,
                config,
                overrides: Overrides {
                    rounds,
                    ..Overrides::default()
                },
                seed,
            })?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write_or_print(out.as_deref(), &text)?;
            Ok(if status == Status::Ok { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::TraceStats { traces } => {
            print_json(&cmd_trace_stats(&traces)?);
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
