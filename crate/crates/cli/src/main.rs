//! `mipae`: dataset generation, both training phases, prediction and evaluation.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mipae_core::MipaeError;

use commands::Split;

/// Success.
pub const EXIT_OK: u8 = 0;
/// Any failure not covered below.
pub const EXIT_OTHER: u8 = 1;
/// Invalid command line (reported by clap).
pub const EXIT_USAGE: u8 = 2;
/// Invalid configuration, or config/checkpoint/dataset mismatch.
pub const EXIT_CONFIG: u8 = 3;
/// Missing, unreadable, unwritable or corrupt files.
pub const EXIT_IO: u8 = 4;
/// Non-finite training loss or failed numeric estimate.
pub const EXIT_NUMERIC: u8 = 5;

/// Compute backend selection.
pub const DEVICE_ENV: &str = "MIPAE_DEVICE";

const AFTER_HELP: &str = "\
Environment:
  MIPAE_DEVICE        cpu (default, data-parallel over all cores) or cpu-serial
                      (single-threaded). Other values are rejected.
  RAYON_NUM_THREADS   caps the worker threads used by `cpu`.
  RUST_LOG            log filter (default: info).

Exit codes:
  0 success, 1 other failure, 2 invalid arguments, 3 configuration error
  (including config/checkpoint/dataset mismatch), 4 IO error or corrupt file,
  5 numeric failure (non-finite loss).";

#[derive(Debug, Parser)]
#[command(name = "mipae", version, about = "Content/pose video prediction: generate, train, predict, evaluate", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file. Flags override values from the file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override (see each subcommand for which seed it sets).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; created if missing. A manifest.json there records every invocation.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a moving-sprites dataset file (`train.mvd` or `test.mvd`).
    ///
    /// --seed sets data.seed (train split) or eval.test_seed (test split).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Phase 1: train encoders, decoder and critic.
    ///
    /// Writes train_log.csv, best.ckpt and last.ckpt. --seed sets the training seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pose penalty: mutual-information bound, adversarial discriminator, or none.
        #[arg(long, value_parser = ["mipae", "drnet", "none"])]
        baseline: Option<String>,
        /// Dataset file to train on instead of generating clips from [data].
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Phase 2: train the pose predictor on frozen encoders.
    ///
    /// Writes lstm_log.csv and lstm.ckpt. --seed sets the training seed.
    TrainLstm {
        #[command(flatten)]
        common: Common,
        /// Phase-1 checkpoint.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Predict future frames of held-out clips and write PNG strips.
    ///
    /// --seed sets the seed of the held-out clips.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with a trained predictor.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Observed frames per clip (must match training).
        #[arg(long)]
        context: Option<usize>,
        /// Frames to predict (defaults to the trained horizon).
        #[arg(long)]
        horizon: Option<usize>,
        /// Number of clips to predict.
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: report.csv, PSNR/SSIM curves, swap grids, optional MIG.
    ///
    /// --seed sets the seed of the held-out clips.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Also estimate the mutual information gap and write mig.csv.
        #[arg(long)]
        mig: bool,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
    },
}

fn configure_device() -> Result<(), MipaeError> {
    match std::env::var(DEVICE_ENV).as_deref() {
        Err(_) | Ok("") | Ok("cpu") => mipae_core::exec::set_parallel(true),
        Ok("cpu-serial") => mipae_core::exec::set_parallel(false),
        Ok(other) => {
            return Err(MipaeError::config(format!("{DEVICE_ENV}={other:?} is not supported (use cpu or cpu-serial)")))
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_device()?;
    match cli.command {
        Command::Generate { common, split } => {
            let mut cfg = commands::load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                match split {
                    Split::Train => cfg.data.seed = s,
                    Split::Test => cfg.eval.test_seed = s,
                }
            }
            commands::generate(cfg, split, &common.out)
        }
        Command::Train { common, baseline, data } => {
            let mut cfg = commands::load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(b) = baseline {
                cfg.baseline = commands::parse_baseline(&b)?;
            }
            commands::train(cfg, data.as_deref(), &common.out)
        }
        Command::TrainLstm { common, checkpoint, data } => {
            let file = common.config.as_deref().map(|p| commands::load_config(Some(p))).transpose()?;
            let ckpt = commands::load_checkpoint(&checkpoint, file, None)?;
            commands::train_lstm_cmd(ckpt, &checkpoint, common.seed, data.as_deref(), &common.out)
        }
        Command::Predict { common, checkpoint, context, horizon, clips, data } => {
            let file = common.config.as_deref().map(|p| commands::load_config(Some(p))).transpose()?;
            let ckpt = commands::load_checkpoint(&checkpoint, file, common.seed)?;
            let args = commands::PredictArgs { context, horizon, clips, data: data.as_deref() };
            commands::predict_cmd(ckpt, &checkpoint, args, &common.out)
        }
        Command::Eval { common, checkpoint, mig, data } => {
            let file = common.config.as_deref().map(|p| commands::load_config(Some(p))).transpose()?;
            let ckpt = commands::load_checkpoint(&checkpoint, file, common.seed)?;
            commands::eval_cmd(ckpt, &checkpoint, mig, data.as_deref(), &common.out)
        }
    }
}

/// Exit status for an error chain: the first library error found decides.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<MipaeError>() {
            return match e {
                MipaeError::Config(_) | MipaeError::Shape { .. } | MipaeError::Checkpoint(_) => EXIT_CONFIG,
                MipaeError::Io { .. } | MipaeError::Corrupt { .. } | MipaeError::Version { .. } => EXIT_IO,
                MipaeError::NonFinite { .. } | MipaeError::Estimator(_) | MipaeError::Tensor(_) => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
    }

    #[test]
    fn errors_map_to_their_class() {
        let cfg = anyhow::Error::from(MipaeError::config("x")).context("loading");
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        let io = anyhow::Error::from(MipaeError::io("f", std::io::Error::other("gone")));
        assert_eq!(exit_code(&io), EXIT_IO);
        let nf = anyhow::Error::from(MipaeError::NonFinite { step: 3, detail: "nan".into() });
        assert_eq!(exit_code(&nf), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_OTHER);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
