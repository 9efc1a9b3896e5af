mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusion_probe::fusion::FusionKind;
use fusion_probe::Error;

use config::Flags;

/// Temporal fusion heads and linear probes over frozen frame embeddings.
#[derive(Debug, Parser)]
#[command(name = "fprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    head: Option<FusionKind>,
    #[arg(long)]
    trained_view: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run config; keys it sets take precedence over flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn flags(&self) -> Flags {
        Flags {
            manifest: self.manifest.clone(),
            head: self.head,
            heads: None,
            trained_view: self.trained_view.clone(),
            epochs: self.epochs,
            seed: self.seed,
            out: self.out.clone(),
            config: self.config.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and every embedding header it references.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate a synthetic benchmark (manifest plus embedding files).
    Synth {
        /// Built-in bench: `order` or `shift`.
        #[arg(long, conflicts_with = "config")]
        bench: Option<String>,
        /// Synthetic dataset config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head; writes best.fpck, final.fpck, train_log.jsonl and config.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split; writes report.json and report.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and evaluate several heads; writes sweep.csv keyed by (head, view, metric).
    Sweep {
        /// Comma-separated head kinds; all 13 when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        heads: Option<Vec<FusionKind>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write fused test-video features, views, labels and predictions as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every head with the probe.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn parse_kind(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else if matches!(e, Error::Config(_)) {
            EXIT_USAGE
        } else {
            EXIT_VALIDATION
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { manifest } => commands::validate(&manifest),
        Command::Synth { bench, config, out } => commands::synth(bench.as_deref(), config.as_deref(), &out),
        Command::Train(args) => commands::train(&config::RunConfig::resolve(&args.flags())?),
        Command::Eval { checkpoint, run } => commands::eval(&checkpoint, &config::RunConfig::resolve(&run.flags())?),
        Command::Sweep { heads, run } => {
            let flags = Flags { heads, ..run.flags() };
            commands::sweep(&config::RunConfig::resolve(&flags)?)
        }
        Command::Export {
            checkpoint,
            manifest,
            out,
        } => commands::export(&checkpoint, &manifest, &out),
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
