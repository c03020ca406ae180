use std::path::{Path, PathBuf};

use mipae_tensor::exec;
use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim, FrameShape};
use super::mig::{evaluate_mig, MigConfig};
use super::plot::{curves_svg, write_svg};
use super::swap::{save_png, swap_grid, tile, to_unit, SWAP_TOLERANCE_PX};
use crate::miest::MigReport;
use crate::synthvid::{ClipSource, Dataset};
use crate::trainer::{predict_clips, Checkpoint};
use crate::{MipaeError, Result};

pub const REPORT_CSV_HEADER: [&str; 4] = ["metric", "timestep", "mean", "std"];
/// Metrics listed in `report.csv`; `lpips` rows are left empty.
pub const REPORT_METRICS: [&str; 3] = ["psnr", "ssim", "lpips"];

/// Mean and standard deviation per prediction step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Curve {
    /// Column statistics of `rows[clip][t]` (population std).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let t = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut c = Curve { mean: vec![0.0; t], std: vec![0.0; t] };
        for j in 0..t {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            c.mean[j] = m;
            c.std[j] = v.sqrt();
        }
        c
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Average of the per-step means.
    pub fn average(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len().max(1) as f64
    }
}

/// Per-step frame quality over a set of clips.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutCurves {
    pub psnr: Curve,
    pub ssim: Curve,
    pub clips: usize,
}

/// Everything `eval` produces.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollout: RolloutCurves,
    pub mig: Option<MigReport>,
    pub swap_grids: Vec<PathBuf>,
    /// Centroid distance in pixels for every swap-grid cell.
    pub swap_errors: Vec<f64>,
}

impl EvalReport {
    /// Fraction of swap cells within the pose tolerance.
    pub fn swap_accuracy(&self) -> Option<f64> {
        (!self.swap_errors.is_empty())
            .then(|| self.swap_errors.iter().filter(|&&e| e <= SWAP_TOLERANCE_PX).count() as f64 / self.swap_errors.len() as f64)
    }
}

/// Scores predictions against ground truth. Both are `[clip][t]` frames of
/// unit-range intensities laid out as `shape`.
pub fn score_sequences(truth: &[Vec<Vec<f32>>], preds: &[Vec<Vec<f32>>], shape: FrameShape) -> Result<RolloutCurves> {
    if truth.len() != preds.len() || truth.is_empty() {
        return Err(MipaeError::Shape { op: "rollout", detail: format!("{} true vs {} predicted clips", truth.len(), preds.len()) });
    }
    let steps = truth[0].len();
    if truth.iter().chain(preds).any(|c| c.len() != steps) {
        return Err(MipaeError::Shape { op: "rollout", detail: "clips disagree on the horizon".into() });
    }
    let rows = exec::map_indices(truth.len(), |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut p = Vec::with_capacity(steps);
        let mut s = Vec::with_capacity(steps);
        for t in 0..steps {
            p.push(psnr(&truth[i][t], &preds[i][t], 1.0)?);
            s.push(ssim(&truth[i][t], &preds[i][t], shape)?);
        }
        Ok((p, s))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (p, s): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(RolloutCurves { psnr: Curve::from_rows(&p), ssim: Curve::from_rows(&s), clips: truth.len() })
}

fn check_compat(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    let (tc, dc) = (&ckpt.config.data, &data.config);
    if ckpt.config.net.frame_size != dc.frame_size || tc.context != dc.context || tc.horizon != dc.horizon {
        return Err(MipaeError::config(format!(
            "checkpoint expects {}px frames with context {} and horizon {}, dataset has {}px, {} and {}",
            ckpt.config.net.frame_size, tc.context, tc.horizon, dc.frame_size, dc.context, dc.horizon
        )));
    }
    Ok(())
}

/// Predicts the horizon of up to `max_clips` clips from their context frames
/// and scores every step.
pub fn evaluate_rollout(ckpt: &Checkpoint, data: &Dataset, max_clips: usize) -> Result<RolloutCurves> {
    check_compat(ckpt, data)?;
    let n = data.num_clips().min(max_clips);
    if n == 0 {
        return Err(MipaeError::config("no clips to evaluate"));
    }
    let (c, h) = (data.context(), data.horizon());
    let mut truth = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for start in (0..n).step_by(32) {
        let idx: Vec<usize> = (start..(start + 32).min(n)).collect();
        let contexts: Vec<Vec<&[u8]>> = idx.iter().map(|&i| (0..c).map(|t| data.clip(i).frame_u8(t)).collect()).collect();
        preds.extend(predict_clips(&ckpt.networks, &contexts, h)?);
        truth.extend(idx.iter().map(|&i| (c..c + h).map(|t| data.clip(i).frame(t)).collect::<Vec<_>>()));
    }
    score_sequences(&truth, &preds, FrameShape::square(data.frame_size(), 1))
}

/// Writes `report.csv` in long format. LPIPS rows carry empty values.
pub fn write_report_csv(curves: &RolloutCurves, path: &Path) -> Result<()> {
    let io = |e: csv::Error| MipaeError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(REPORT_CSV_HEADER).map_err(io)?;
    for metric in REPORT_METRICS {
        let curve = match metric {
            "psnr" => Some(&curves.psnr),
            "ssim" => Some(&curves.ssim),
            _ => None,
        };
        let steps = curves.psnr.len();
        for t in 0..steps {
            let (m, s) = curve.map_or((String::new(), String::new()), |c| (format!("{:.6}", c.mean[t]), format!("{:.6}", c.std[t])));
            w.write_record([metric.to_string(), (t + 1).to_string(), m, s]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| MipaeError::io(path, e))
}

/// Swap-grid settings: `rows` content clips against the full sequence of each
/// of `pose_clips` clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapConfig {
    pub rows: usize,
    pub pose_clips: usize,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { rows: 8, pose_clips: 4 }
    }
}

/// Evaluation settings shared by the CLI and the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out clips scored by the rollout evaluation.
    pub test_clips: usize,
    /// Seed of the held-out dataset (must differ from the training seed).
    pub test_seed: u64,
    pub mig: MigConfig,
    pub swap: SwapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_clips: 256, test_seed: 1_000_003, mig: MigConfig::default(), swap: SwapConfig::default() }
    }
}

/// Builds the swap grids from disjoint clips of `data`; writes PNGs into
/// `out_dir` when given. Returns the grid paths and every cell's error.
pub fn evaluate_swaps(ckpt: &Checkpoint, data: &Dataset, cfg: &SwapConfig, out_dir: Option<&Path>) -> Result<(Vec<PathBuf>, Vec<f64>)> {
    check_compat(ckpt, data)?;
    if data.config.num_objects != 1 {
        return Err(MipaeError::config("swap grids need single-object clips"));
    }
    if cfg.rows + cfg.pose_clips > data.num_clips() {
        return Err(MipaeError::config(format!("swap grids need {} clips, dataset has {}", cfg.rows + cfg.pose_clips, data.num_clips())));
    }
    let contents: Vec<&[u8]> = (0..cfg.rows).map(|i| data.clip(i).frame_u8(0)).collect();
    let (mut paths, mut errors) = (Vec::new(), Vec::new());
    for g in 0..cfg.pose_clips {
        let clip = data.clip(cfg.rows + g);
        let poses: Vec<&[u8]> = (0..clip.len).map(|t| clip.frame_u8(t)).collect();
        let grid = swap_grid(&ckpt.networks, &contents, &poses)?;
        errors.extend(grid.centroid_errors(&poses)?);
        if let Some(dir) = out_dir {
            // header row shows the pose sequence, first column the content frames
            let size = grid.size;
            let blank = vec![0.0f32; size * size];
            let mut cells = vec![blank];
            cells.extend(poses.iter().map(|f| to_unit(f)));
            for r in 0..grid.rows {
                cells.push(to_unit(contents[r]));
                cells.extend((0..grid.cols).map(|c| grid.cell(r, c).to_vec()));
            }
            let path = dir.join(format!("swap_grid_{g}.png"));
            save_png(&tile(&cells, grid.rows + 1, grid.cols + 1, size), &path)?;
            paths.push(path);
        }
    }
    Ok((paths, errors))
}

/// Full evaluation: rollout curves, optionally MIG, and swap grids. Writes
/// `report.csv`, `psnr.svg`, `ssim.svg`, `mig.csv`, the grid PNGs and
/// `eval.json` into `out_dir` when given.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, cfg: &EvalConfig, with_mig: bool, out_dir: Option<&Path>) -> Result<EvalReport> {
    let rollout = evaluate_rollout(ckpt, data, cfg.test_clips)?;
    let mig = if with_mig { Some(evaluate_mig(&ckpt.networks, &data.config, Some(data), &cfg.mig)?) } else { None };
    let (swap_grids, swap_errors) = evaluate_swaps(ckpt, data, &cfg.swap, out_dir)?;
    let report = EvalReport { rollout, mig, swap_grids, swap_errors };
    if let Some(dir) = out_dir {
        write_report_csv(&report.rollout, &dir.join("report.csv"))?;
        let name = ckpt.config.baseline.to_string();
        write_svg(&dir.join("psnr.svg"), &curves_svg("PSNR", "PSNR (dB)", &[(&name, &report.rollout.psnr)]))?;
        write_svg(&dir.join("ssim.svg"), &curves_svg("SSIM", "SSIM", &[(&name, &report.rollout.ssim)]))?;
        if let Some(m) = &report.mig {
            let path = dir.join("mig.csv");
            let f = std::fs::File::create(&path).map_err(|e| MipaeError::io(&path, e))?;
            MigReport::write_csv(&[(&name, *m)], f).map_err(|e| MipaeError::io(&path, e))?;
        }
        let path = dir.join("eval.json");
        let json = serde_json::to_string_pretty(&report).map_err(|e| MipaeError::io(&path, std::io::Error::other(e)))?;
        std::fs::write(&path, json).map_err(|e| MipaeError::io(&path, e))?;
    }
    Ok(report)
}
