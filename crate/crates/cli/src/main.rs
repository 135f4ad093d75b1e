use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qcrowd_cli::commands::{
    cmd_evaluate, cmd_gen_synth, cmd_gen_targets, cmd_stats, cmd_train, EvaluateArgs,
};
use qcrowd_cli::config::PipelineConfig;
use qcrowd_cli::{resolve_threads, CliError};

/// Multi-level crowd density toolkit: synthetic data, ground-truth targets,
/// model training, and full evaluation.
#[derive(Parser)]
#[command(name = "qcrowd", version, about)]
struct Cli {
    /// JSON pipeline configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: QCK_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes or ground-truth targets.
    Gen {
        #[command(subcommand)]
        what: GenCommand,
    },
    /// Summarize the annotation sets listed in a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Emit the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train the reference model on patches sampled from a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train_out")]
        out_dir: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint (or replay ground truth) over a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval_out")]
        out_dir: PathBuf,
        /// Trained model checkpoint; required unless --oracle-gt is set.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extract peaks from the impulse map and report localization metrics.
        #[arg(long)]
        localize: bool,
        /// Feed ground truth through the whole evaluation path.
        #[arg(long)]
        oracle_gt: bool,
        /// Comma-separated pixel thresholds to report precision/recall at.
        #[arg(long, value_delimiter = ',')]
        at_thresholds: Vec<u32>,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Synthesize scenes: images, annotation files, and a manifest.
    Synth {
        #[arg(long, default_value = "synth_out")]
        out_dir: PathBuf,
        /// Override the configured scene count.
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Render per-level ground-truth density maps for a manifest.
    Targets {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "targets_out")]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = resolve_threads(cli.threads)?;
    match cli.command {
        Command::Gen { what } => match what {
            GenCommand::Synth { out_dir, n_images } => {
                if let Some(n) = n_images {
                    cfg.scenes.n_images = n;
                    cfg.validate()?;
                }
                cmd_gen_synth(&cfg, &out_dir, threads)
            }
            GenCommand::Targets { manifest, out_dir } => {
                cmd_gen_targets(&cfg, &manifest, &out_dir, threads)
            }
        },
        Command::Stats { manifest, json } => cmd_stats(&manifest, json, threads),
        Command::Train {
            manifest,
            out_dir,
            epochs,
        } => {
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            cmd_train(&cfg, &manifest, &out_dir, threads)
        }
        Command::Evaluate {
            manifest,
            out_dir,
            checkpoint,
            localize,
            oracle_gt,
            at_thresholds,
        } => cmd_evaluate(
            &cfg,
            &EvaluateArgs {
                manifest: &manifest,
                out_dir: &out_dir,
                checkpoint: checkpoint.as_deref(),
                localize,
                oracle_gt,
                at_thresholds,
                threads,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
