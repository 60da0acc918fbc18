//! `gma`: generate corpora, train, evaluate, analyze and sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(
    name = "gma",
    version,
    about = "Gaussian-mixture cross-attention toy NMT experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set gma.K=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        o
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic aligned corpus as JSON lines.
    Generate {
        /// copy, reverse, window_permute:W or expand:P
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the gold links in Pharaoh format.
        #[arg(long)]
        alignments: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write metrics, checkpoint and report to a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Held-out loss, token accuracy, BLEU and AER of a checkpoint on a corpus.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Diagnostic reports for a checkpoint on a corpus.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// entropy, gates, aer, ngram, buckets (comma-separated or repeated).
        #[arg(long, value_delimiter = ',', required = true)]
        report: Vec<String>,
        /// Second checkpoint for the n-gram precision gap.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// One training run per combination of axis values.
    Sweep {
        /// e.g. `K=1,2,4,8` or `gma_layers=none,bottom2,top2,all`. Repeatable.
        #[arg(long, required = true)]
        axis: Vec<String>,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            task,
            out,
            alignments,
            cfg,
        } => commands::generate(&cfg, task.as_deref(), &out, alignments.as_deref()),
        Command::Train { cfg } => commands::train(&cfg),
        Command::Evaluate { ckpt, corpus, cfg } => commands::evaluate(&cfg, &ckpt, &corpus),
        Command::Analyze {
            ckpt,
            corpus,
            report,
            baseline,
            cfg,
        } => commands::analyze(&cfg, &ckpt, &corpus, &report, baseline.as_deref()),
        Command::Sweep {
            axis,
            parallel,
            cfg,
        } => commands::sweep(&cfg, &axis, parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
