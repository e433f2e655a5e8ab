//! `lstnmt`: document-level NMT with long-short term masking attention.
//!
//! Pipeline: `preprocess` builds the binary dataset, `train` fits a model,
//! `translate` runs sliding-window inference, `evaluate` scores BLEU,
//! `score-contrastive` measures consistency accuracy, and `masks` prints
//! attention masks for inspection.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::MaskKind;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lstnmt", version, about = "Document-level NMT with long-short term masking attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build vocabularies and the binary dataset from the parallel corpus.
    Preprocess {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set model.d=64.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model, writing checkpoints and a metrics log to the run dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Random seed (overrides `[run] seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of epochs (overrides `[train] epochs`).
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Sliding-window translation of a source document file.
    Translate {
        #[arg(long)]
        config: PathBuf,
        /// Model checkpoint (default: `<run dir>/checkpoints/best.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source documents: one sentence per line, blank line between docs.
        #[arg(long)]
        input: PathBuf,
        /// Sentences per window (overrides `[model] k`).
        #[arg(long)]
        k: Option<usize>,
        /// Beam size (overrides `[decode] beam`).
        #[arg(long)]
        beam: Option<usize>,
        /// Window position to assemble: a 1-based index or `last`.
        #[arg(long)]
        position: Option<String>,
        /// Also write the full translation grid as TSV.
        #[arg(long)]
        grid_dump: bool,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Corpus BLEU of HYP against REF, or a per-position report from a grid.
    Evaluate {
        /// HYP and REF files (REF only with --per-position).
        #[arg(value_name = "FILE", num_args = 1..=2)]
        files: Vec<PathBuf>,
        /// Grid dump (from translate --grid-dump) to score position by position.
        #[arg(long, value_name = "GRID_TSV")]
        per_position: Option<PathBuf>,
    },
    /// Per-phenomenon contrastive consistency accuracy.
    ScoreContrastive {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Contrastive groups file (SRC/CAND/TRUE/PHEN blocks).
        #[arg(long)]
        groups: PathBuf,
        /// Score candidates by mean per-token log-probability instead of the sum.
        #[arg(long)]
        mean_per_token: bool,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print an attention mask over the tokens of a file as a 0/- grid.
    Masks {
        /// Whitespace-separated tokens.
        tokens_file: PathBuf,
        /// Separator token surface form.
        #[arg(long, default_value = "<sep>")]
        sep: String,
        /// Which mask to print.
        #[arg(long, value_enum)]
        kind: MaskKind,
    },
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Preprocess { config, set } => {
            let cfg = RunConfig::load(&config, &set)?;
            commands::preprocess(&cfg)
        }
        Cmd::Train {
            config,
            seed,
            epochs,
            max_steps,
            resume,
            set,
        } => {
            let mut set = set;
            if let Some(s) = seed {
                set.push(format!("run.seed={s}"));
            }
            if let Some(e) = epochs {
                set.push(format!("train.epochs={e}"));
            }
            if let Some(m) = max_steps {
                set.push(format!("train.max_steps={m}"));
            }
            let cfg = RunConfig::load(&config, &set)?;
            commands::train(&cfg, resume)
        }
        Cmd::Translate {
            config,
            checkpoint,
            input,
            k,
            beam,
            position,
            grid_dump,
            set,
        } => {
            let mut set = set;
            if let Some(k) = k {
                set.push(format!("model.k={k}"));
            }
            if let Some(b) = beam {
                set.push(format!("decode.beam={b}"));
            }
            if let Some(p) = position {
                set.push(format!("decode.position={p}"));
            }
            let cfg = RunConfig::load(&config, &set)?;
            commands::translate(&cfg, checkpoint.as_deref(), &input, grid_dump)
        }
        Cmd::Evaluate {
            files,
            per_position,
        } => commands::evaluate(&files, per_position.as_deref()),
        Cmd::ScoreContrastive {
            config,
            checkpoint,
            groups,
            mean_per_token,
            set,
        } => {
            let cfg = RunConfig::load(&config, &set)?;
            commands::score_contrastive(&cfg, checkpoint.as_deref(), &groups, mean_per_token)
        }
        Cmd::Masks {
            tokens_file,
            sep,
            kind,
        } => commands::masks(&tokens_file, &sep, kind),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Single-line, machine-parsable error report.
            let chain = e
                .chain()
                .map(|c| c.to_string().replace('\n', " "))
                .collect::<Vec<_>>()
                .join(": ");
            eprintln!("error: {chain}");
            ExitCode::FAILURE
        }
    }
}
