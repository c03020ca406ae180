use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use mipae_core::evalkit::{evaluate, save_frame_grid};
use mipae_core::objectives::Baseline;
use mipae_core::synthvid::{read_dataset, write_dataset, ClipSource, Dataset, DatasetConfig};
use mipae_core::trainer::{predict_clips, train_lstm, train_main, Checkpoint, TrainConfig};
use mipae_core::MipaeError;

use crate::manifest::{ManifestEntry, RunManifest, Seeds};

/// Which clips `generate` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    /// Training clips from `[data]`.
    Train,
    /// Held-out clips from `[data]` with `eval.test_seed` and `eval.test_clips`.
    Test,
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn seeds(cfg: &TrainConfig) -> Seeds {
    Seeds { train: cfg.seed, data: cfg.data.seed, test: cfg.eval.test_seed }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MipaeError::io(dir, e))?;
    Ok(())
}

fn finish(out: &Path, entry: ManifestEntry, artifacts: &[&str]) -> Result<()> {
    RunManifest::record(out, entry, artifacts.iter().map(PathBuf::from).collect())?;
    Ok(())
}

/// Loads `path` or generates clips from `cfg`, checking the two agree on the
/// frame geometry and clip length.
fn dataset(path: Option<&Path>, cfg: &DatasetConfig, entry: &mut ManifestEntry) -> Result<Dataset> {
    match path {
        Some(p) => {
            let d = read_dataset(p)?;
            entry.input(p)?;
            let c = &d.config;
            if c.frame_size != cfg.frame_size || c.context != cfg.context || c.horizon < cfg.horizon {
                return Err(MipaeError::config(format!(
                    "{}: dataset has {}px frames, context {}, horizon {}; the run needs {}px, {}, {}",
                    p.display(),
                    c.frame_size,
                    c.context,
                    c.horizon,
                    cfg.frame_size,
                    cfg.context,
                    cfg.horizon
                ))
                .into());
            }
            Ok(d)
        }
        None => Ok(Dataset::generate(cfg)?),
    }
}

pub fn generate(cfg: TrainConfig, split: Split, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let (data_cfg, name) = match split {
        Split::Train => (cfg.data.clone(), "train.mvd"),
        Split::Test => (cfg.test_data(), "test.mvd"),
    };
    let entry = ManifestEntry::start("generate", cfg.to_toml(), seeds(&cfg));
    let d = Dataset::generate(&data_cfg)?;
    write_dataset(&d, out.join(name))?;
    info!("wrote {} clips of {} frames to {}", d.len(), data_cfg.clip_len(), out.join(name).display());
    finish(out, entry, &[name])
}

pub fn train(cfg: TrainConfig, data: Option<&Path>, out: &Path) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let mut entry = ManifestEntry::start("train", cfg.to_toml(), seeds(&cfg));
    let all = dataset(data, &cfg.data, &mut entry)?;
    if all.len() < cfg.validation_clips + cfg.batch_size {
        return Err(MipaeError::config(format!("dataset has {} clips, too few for validation plus one batch", all.len())).into());
    }
    let (train, val) = all.split_tail(cfg.validation_clips);
    info!("phase 1: {} steps, baseline {}, {} train / {} validation clips", cfg.steps_phase1, cfg.baseline, train.len(), val.len());
    let outcome = train_main(&train, &val, &cfg, Some(out))?;
    info!(
        "done: best validation MSE {:?} at step {}",
        outcome.last.stats.best_val_recon, outcome.last.stats.best_step
    );
    let mut arts = vec!["train_log.csv", "last.ckpt"];
    if out.join("best.ckpt").exists() {
        arts.push("best.ckpt");
    }
    finish(out, entry, &arts)
}

/// Applies the phase-2 and evaluation settings of a config file to a
/// checkpoint; model and data settings must agree.
pub fn merge_into_checkpoint(ckpt: &mut Checkpoint, file: Option<TrainConfig>) -> Result<()> {
    let Some(file) = file else { return Ok(()) };
    let c = &ckpt.config;
    if file.net != c.net || file.data != c.data {
        return Err(MipaeError::config("config file disagrees with the checkpoint on [net] or [data]").into());
    }
    ckpt.config.steps_phase2 = file.steps_phase2;
    ckpt.config.lstm_batch_size = file.lstm_batch_size;
    ckpt.config.lstm_optimizer = file.lstm_optimizer;
    ckpt.config.eval = file.eval;
    ckpt.config.validate()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, file: Option<TrainConfig>, entry_seed: Option<u64>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::load(path)?;
    merge_into_checkpoint(&mut ckpt, file)?;
    if let Some(s) = entry_seed {
        ckpt.config.eval.test_seed = s;
        ckpt.config.validate()?;
    }
    Ok(ckpt)
}

pub fn train_lstm_cmd(mut ckpt: Checkpoint, ckpt_path: &Path, seed: Option<u64>, data: Option<&Path>, out: &Path) -> Result<()> {
    if let Some(s) = seed {
        ckpt.config.seed = s;
    }
    ensure_dir(out)?;
    let mut entry = ManifestEntry::start("train-lstm", ckpt.config.to_toml(), seeds(&ckpt.config));
    entry.input(ckpt_path)?;
    let all = dataset(data, &ckpt.config.data, &mut entry)?;
    let (train, _) = all.split_tail(ckpt.config.validation_clips);
    info!("phase 2: {} steps on {} clips", ckpt.config.steps_phase2, train.len());
    let outcome = train_lstm(&train, ckpt, Some(out))?;
    info!("final pose loss {:.5}", outcome.checkpoint.stats.lstm);
    finish(out, entry, &["lstm_log.csv", "lstm.ckpt"])
}

pub struct PredictArgs<'a> {
    pub context: Option<usize>,
    pub horizon: Option<usize>,
    pub clips: usize,
    pub data: Option<&'a Path>,
}

pub fn predict_cmd(ckpt: Checkpoint, ckpt_path: &Path, args: PredictArgs<'_>, out: &Path) -> Result<()> {
    let trained = ckpt.config.data.context;
    let context = args.context.unwrap_or(trained);
    if context != trained {
        return Err(MipaeError::config(format!("--context {context} differs from the trained context {trained}")).into());
    }
    let horizon = args.horizon.unwrap_or(ckpt.config.data.horizon);
    if horizon == 0 {
        return Err(MipaeError::config("--horizon must be positive").into());
    }
    ensure_dir(out)?;
    let mut entry = ManifestEntry::start("predict", ckpt.config.to_toml(), seeds(&ckpt.config));
    entry.input(ckpt_path)?;
    let data_cfg = DatasetConfig { horizon, num_sequences: args.clips, ..ckpt.config.test_data() };
    let test = dataset(args.data, &data_cfg, &mut entry)?;
    let n = args.clips.min(test.len());
    let contexts: Vec<Vec<&[u8]>> = (0..n).map(|i| (0..context).map(|t| test.clip(i).frame_u8(t)).collect()).collect();
    let preds = predict_clips(&ckpt.networks, &contexts, horizon)?;
    let size = ckpt.config.net.frame_size;
    let dir = out.join("predict");
    ensure_dir(&dir)?;
    for (i, p) in preds.iter().enumerate() {
        save_frame_grid(p, 1, horizon, size, dir.join(format!("pred_{i:03}.png")))?;
        // top: true clip; bottom: context followed by predictions
        let clip = test.clip(i);
        let mut cells: Vec<Vec<f32>> = (0..context + horizon).map(|t| clip.frame(t)).collect();
        cells.extend((0..context).map(|t| clip.frame(t)));
        cells.extend(p.iter().cloned());
        save_frame_grid(&cells, 2, context + horizon, size, dir.join(format!("compare_{i:03}.png")))?;
    }
    info!("wrote {n} predicted clips of {horizon} frames to {}", dir.display());
    finish(out, entry, &["predict"])
}

pub fn eval_cmd(ckpt: Checkpoint, ckpt_path: &Path, with_mig: bool, data: Option<&Path>, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let mut entry = ManifestEntry::start("eval", ckpt.config.to_toml(), seeds(&ckpt.config));
    entry.input(ckpt_path)?;
    let test = dataset(data, &ckpt.config.test_data(), &mut entry)?;
    let report = evaluate(&ckpt, &test, &ckpt.config.eval, with_mig, Some(out))
        .with_context(|| format!("evaluating {}", ckpt_path.display()))?;
    info!(
        "mean PSNR {:.2} dB, mean SSIM {:.4} over {} clips",
        report.rollout.psnr.average(),
        report.rollout.ssim.average(),
        report.rollout.clips
    );
    if let Some(acc) = report.swap_accuracy() {
        info!("pose swap: {:.1}% of cells within 3 px", 100.0 * acc);
    }
    let mut arts = vec!["report.csv", "psnr.svg", "ssim.svg", "eval.json"];
    if let Some(m) = &report.mig {
        info!("MIG {:.4}", m.mig);
        arts.push("mig.csv");
    }
    let grids: Vec<String> = report.swap_grids.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    arts.extend(grids.iter().map(String::as_str));
    finish(out, entry, &arts)
}

pub fn parse_baseline(s: &str) -> Result<Baseline> {
    Ok(s.parse::<Baseline>()?)
}
