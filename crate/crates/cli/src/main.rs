//! `opendg`: open-pool generation, training, evaluation, leave-one-domain-out
//! campaigns and diagnostics driven by a TOML run config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opendg::promptspace::TokenPosition;

use crate::commands::{exit_code, run};

#[derive(Parser, Debug)]
#[command(name = "opendg", version, about = "Open domain generalization with prompt-differential latent images")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate, filter and cache the pseudo-open pool of each held-out split.
    GenerateOpen {
        #[command(flatten)]
        common: Common,
        /// Only this held-out domain (all splits when omitted).
        #[arg(long)]
        target: Option<String>,
    },
    /// Train one split from its cached open pool.
    Train {
        #[command(flatten)]
        common: Common,
        /// Held-out domain of the split to train.
        #[arg(long)]
        target: String,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs; resume later to finish.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on its held-out domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every held-out split over several seeds.
    Lodo {
        #[command(flatten)]
        common: Common,
        /// Number of seeded runs to average.
        #[arg(long)]
        seeds: Option<usize>,
        /// Report closed-set accuracy only and ignore the class split.
        #[arg(long)]
        closed_set: bool,
    },
    /// Cosine table, Fréchet matrix and openness sweep for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for a paired cosine comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

/// Options shared by every command. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run config; the built-in toy preset when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory (defaults to `eval.out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ablation switch; may be repeated.
    #[arg(long = "ablate")]
    pub ablate: Vec<String>,
    /// Domain-token position in both prompts.
    #[arg(long, value_parser = parse_position)]
    pub dom_token_position: Option<TokenPosition>,
    /// Positive prompt only: no class-name negatives.
    #[arg(long)]
    pub pp_only: bool,
    /// Entropy threshold of the open-pool filter.
    #[arg(long)]
    pub entropy_threshold: Option<f64>,
    /// Generated images per source domain.
    #[arg(long)]
    pub count: Option<usize>,
    /// Open-pool cache root (overrides config and `OPENDG_CACHE`).
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

fn parse_position(s: &str) -> Result<TokenPosition, String> {
    match s.to_ascii_lowercase().as_str() {
        "front" => Ok(TokenPosition::Front),
        "middle" => Ok(TokenPosition::Middle),
        "end" => Ok(TokenPosition::End),
        _ => Err(format!("expected front, middle or end, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(&cli.log_level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
