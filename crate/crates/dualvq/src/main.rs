use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use dualvq::cli;
use dualvq::config::ExperimentConfig;

/// Dual-codebook VQ-VAE experiments: corpus generation, training the five
/// system variants, and the diarization / phone-recognition evaluations.
#[derive(Parser)]
#[command(name = "dualvq", version, about)]
struct Args {
    /// Experiment config file (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Override the config's corpus directory.
    #[arg(long, global = true)]
    corpus_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (audio, alignments, manifest).
    GenCorpus {
        /// Override the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one system variant on the generated corpus.
    Train {
        /// base | global_vq | speaker_label_s | speaker_label_as |
        /// adversarial_s | adversarial_as
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Base checkpoint to warm-start a dual variant from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Checkpoint to fine-tune with speaker components frozen.
        #[arg(long)]
        freeze_fine_tune_from: Option<PathBuf>,
    },
    /// Reconstruction/code-space evaluation over conditions C1-C4.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Two-speaker sliding-window diarization, scored by DER.
    Diarize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Code-sequence phone recognition, scored by PER.
    Recognize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render CSV tables and SVG plots from existing reports.
    Report,
}

fn run() -> Result<()> {
    let args = Args::parse();
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(dir) = args.corpus_dir {
        config.corpus.dir = dir;
    }

    match args.command {
        Command::GenCorpus { seed } => {
            if let Some(s) = seed {
                config.corpus.params.seed = s;
            }
            cli::cmd_gen_corpus(&config)?;
        }
        Command::Train {
            variant,
            steps,
            seed,
            warm_start,
            freeze_fine_tune_from,
        } => {
            if let Some(v) = variant {
                config.model.variant = v.parse().map_err(anyhow::Error::msg)?;
            }
            if let Some(s) = steps {
                config.training.steps = s;
            }
            if let Some(s) = seed {
                config.training.seed = s;
                config.model.seed = s;
            }
            if warm_start.is_some() {
                config.training.warm_start = warm_start;
            }
            if freeze_fine_tune_from.is_some() {
                config.training.freeze_fine_tune_from = freeze_fine_tune_from;
            }
            cli::cmd_train(&config)?;
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| config.output_dir().join(cli::CHECKPOINT_FILE));
            cli::cmd_eval(&config, &ckpt)?;
        }
        Command::Diarize { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| config.output_dir().join(cli::CHECKPOINT_FILE));
            cli::cmd_diarize(&config, &ckpt)?;
        }
        Command::Recognize { checkpoint } => {
            let ckpt = checkpoint.unwrap_or_else(|| config.output_dir().join(cli::CHECKPOINT_FILE));
            cli::cmd_recognize(&config, &ckpt)?;
        }
        Command::Report => cli::cmd_report(&config)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
