//! Recurrent pose prediction on top of frozen encoders, and frame prediction.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::info;
use mipae_tensor::{Adam, Mode, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, LossStats};
use crate::error::{MipaeError, Result};
use crate::nets::{frames_tensor, Networks, PosePredictor};
use crate::objectives::sim_loss;
use crate::synthvid::ClipSource;

/// Codes of a set of clips under frozen encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipLatents {
    /// `[N, content_dim]`, content code of the last context frame.
    pub content: Tensor<f32>,
    /// `[N, len, pose_dim]`
    pub poses: Tensor<f32>,
    pub len: usize,
}

impl ClipLatents {
    pub fn num_clips(&self) -> usize {
        self.content.dim(0)
    }

    /// Pose codes at time `t` for the given clips, `[clips.len(), pose_dim]`.
    pub fn poses_at(&self, clips: &[usize], t: usize) -> Tensor<f32> {
        let dp = self.poses.dim(2);
        let mut data = Vec::with_capacity(clips.len() * dp);
        for &c in clips {
            let at = (c * self.len + t) * dp;
            data.extend_from_slice(&self.poses.data()[at..at + dp]);
        }
        Tensor::from_vec(&[clips.len(), dp], data).expect("pose rows")
    }
}

/// Encodes every clip of `data` in evaluation mode.
pub fn encode_latents<S: ClipSource>(nets: &Networks<f32>, data: &S) -> ClipLatents {
    let (size, ch) = (nets.config.frame_size, nets.config.channels);
    let (n, len, context) = (data.num_clips(), data.clip_len(), data.context());
    let mut content = Vec::with_capacity(n * nets.config.content_dim);
    let mut poses = Vec::with_capacity(n * len * nets.config.pose_dim);
    let per_chunk = (256 / len).max(1);
    for start in (0..n).step_by(per_chunk) {
        let clips: Vec<usize> = (start..(start + per_chunk).min(n)).collect();
        let frames: Vec<&[u8]> = clips.iter().flat_map(|&c| (0..len).map(move |t| data.clip(c).frame_u8(t))).collect();
        let last: Vec<&[u8]> = clips.iter().map(|&c| data.clip(c).frame_u8(context - 1)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(frames_tensor::<f32>(&frames, size, ch));
        let zp = nets.pose.encode(&mut tape, x, Mode::EVAL);
        poses.extend_from_slice(tape.value(zp).data());
        let xl = tape.constant(frames_tensor::<f32>(&last, size, ch));
        let zc = nets.content.encode(&mut tape, xl, Mode::EVAL);
        content.extend_from_slice(tape.value(zc).data());
    }
    ClipLatents {
        content: Tensor::from_vec(&[n, nets.config.content_dim], content).expect("content rows"),
        poses: Tensor::from_vec(&[n, len, nets.config.pose_dim], poses).expect("pose rows"),
        len,
    }
}

/// Where the predictor's pose input comes from at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseSource {
    Encoder,
    Prediction,
}

/// Source of the input used to predict the pose of 0-based frame `t >= 1`:
/// encoder poses while the previous frame is a context frame, the model's
/// own predictions afterwards.
pub fn pose_source(t: usize, context: usize) -> PoseSource {
    if t <= context {
        PoseSource::Encoder
    } else {
        PoseSource::Prediction
    }
}

/// Runs the predictor over frames `1..total`, returning the predicted pose
/// for each of them and the input source used at each step.
pub fn rollout(
    tape: &mut Tape<f32>,
    predictor: &PosePredictor<f32>,
    content: Var,
    encoder_poses: &[Var],
    context: usize,
    total: usize,
    mode: Mode,
) -> (Vec<Var>, Vec<PoseSource>) {
    assert!(encoder_poses.len() >= context && context >= 1, "rollout needs the context poses");
    let batch = tape.shape(content)[0];
    let mut state = predictor.zero_state(tape, batch);
    let mut preds: Vec<Var> = Vec::with_capacity(total.saturating_sub(1));
    let mut sources = Vec::with_capacity(total.saturating_sub(1));
    for t in 1..total {
        let source = pose_source(t, context);
        let input = match source {
            PoseSource::Encoder => encoder_poses[t - 1],
            PoseSource::Prediction => preds[t - 2],
        };
        let (next, s) = predictor.step(tape, content, input, &state, mode);
        state = s;
        preds.push(next);
        sources.push(source);
    }
    (preds, sources)
}

/// Summed squared pose error over frames `1..len`, batch-averaged.
fn rollout_loss(tape: &mut Tape<f32>, predictor: &PosePredictor<f32>, latents: &ClipLatents, clips: &[usize], context: usize, mode: Mode) -> Var {
    let content = tape.constant(latents.content.select_rows(clips));
    let poses: Vec<Var> = (0..latents.len).map(|t| tape.constant(latents.poses_at(clips, t))).collect();
    let (preds, _) = rollout(tape, predictor, content, &poses, context, latents.len, mode);
    let mut total: Option<Var> = None;
    for (i, &p) in preds.iter().enumerate() {
        let l = sim_loss(tape, p, poses[i + 1]);
        total = Some(match total {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    total.expect("clips have at least two frames")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LstmLosses {
    pub step: u64,
    #[serde(rename = "L_pose")]
    pub loss: f64,
}

#[derive(Debug)]
pub struct LstmOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LstmLosses>,
}

/// Trains the pose predictor of `ckpt` for `steps_phase2` steps with every
/// other parameter group frozen. With `out_dir`, writes `lstm_log.csv` and
/// `lstm.ckpt`.
pub fn train_lstm<S: ClipSource>(data: &S, mut ckpt: Checkpoint, out_dir: Option<&Path>) -> Result<LstmOutcome> {
    let cfg = ckpt.config.clone();
    if data.frame_size() != cfg.net.frame_size || data.context() != cfg.data.context || data.clip_len() != cfg.data.clip_len() {
        return Err(MipaeError::Checkpoint(format!(
            "dataset ({}px, context {}, {} frames) does not match the checkpoint ({}px, context {}, {} frames)",
            data.frame_size(),
            data.context(),
            data.clip_len(),
            cfg.net.frame_size,
            cfg.data.context,
            cfg.data.clip_len()
        )));
    }
    let latents = encode_latents(&ckpt.networks, data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002);
    let mut opt = Adam::new(cfg.lstm_optimizer);
    let batch = cfg.lstm_batch_size.min(latents.num_clips());
    let mut log = Vec::with_capacity(cfg.steps_phase2);
    let mut writer = match out_dir {
        Some(dir) => {
            let path = dir.join("lstm_log.csv");
            let file = File::create(&path).map_err(|e| MipaeError::io(&path, e))?;
            Some((csv::Writer::from_writer(BufWriter::new(file)), path))
        }
        None => None,
    };
    for s in 0..cfg.steps_phase2 {
        let clips = sample(&mut rng, latents.num_clips(), batch).into_vec();
        let predictor = &mut ckpt.networks.predictor;
        let mut tape = Tape::new();
        let loss = rollout_loss(&mut tape, predictor, &latents, &clips, cfg.data.context, Mode::TRAIN);
        let value = tape.item(loss) as f64;
        let step = ckpt.phase2_steps + 1;
        if !value.is_finite() {
            return Err(MipaeError::NonFinite { step, detail: format!("pose prediction loss {value} on clips {clips:?}") });
        }
        let grads = tape.backward(loss);
        let g = grads.for_store(&predictor.store);
        opt.step(&mut predictor.store, &g);
        ckpt.phase2_steps = step;
        LossStats::smooth(&mut ckpt.stats.lstm, value, s == 0);
        let entry = LstmLosses { step, loss: value };
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(entry).map_err(|e| MipaeError::io(path.as_path(), std::io::Error::other(e.to_string())))?;
        }
        log.push(entry);
        if (s + 1) % 500 == 0 {
            info!("lstm step {step}: loss {:.5}", ckpt.stats.lstm);
        }
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| MipaeError::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        ckpt.save(dir.join("lstm.ckpt"))?;
    }
    Ok(LstmOutcome { checkpoint: ckpt, log })
}

/// Predicts `horizon` frames after each clip's `context` frames. Returns, per
/// clip, `horizon` frames of `H * W * C` intensities in `[0, 1]`.
pub fn predict_clips(nets: &Networks<f32>, contexts: &[Vec<&[u8]>], horizon: usize) -> Result<Vec<Vec<Vec<f32>>>> {
    let Some(first) = contexts.first() else { return Ok(Vec::new()) };
    let context = first.len();
    if context == 0 || contexts.iter().any(|c| c.len() != context) {
        return Err(MipaeError::config("every clip needs the same, non-zero number of context frames"));
    }
    let (size, ch) = (nets.config.frame_size, nets.config.channels);
    let n = contexts.len();
    let mut tape = Tape::new();
    let per_time: Vec<Var> = (0..context)
        .map(|t| {
            let frames: Vec<&[u8]> = contexts.iter().map(|c| c[t]).collect();
            let x = tape.constant(frames_tensor::<f32>(&frames, size, ch));
            nets.pose.encode(&mut tape, x, Mode::EVAL)
        })
        .collect();
    let last: Vec<&[u8]> = contexts.iter().map(|c| c[context - 1]).collect();
    let xl = tape.constant(frames_tensor::<f32>(&last, size, ch));
    let enc = nets.content.forward(&mut tape, xl, Mode::EVAL);
    let (preds, _) = rollout(&mut tape, &nets.predictor, enc.code, &per_time, context, context + horizon, Mode::EVAL);
    let frame_len = size * size * ch;
    let mut out = vec![Vec::with_capacity(horizon); n];
    for &p in &preds[context - 1..] {
        let y = nets.decoder.forward(&mut tape, enc.code, p, Some(&enc.features), Mode::EVAL);
        let v = tape.value(y).data();
        for (i, clip) in out.iter_mut().enumerate() {
            clip.push(chw_to_hwc(&v[i * frame_len..(i + 1) * frame_len], size, ch));
        }
    }
    Ok(out)
}

fn chw_to_hwc(v: &[f32], size: usize, ch: usize) -> Vec<f32> {
    if ch == 1 {
        return v.to_vec();
    }
    let plane = size * size;
    (0..plane).flat_map(|p| (0..ch).map(move |c| v[c * plane + p])).collect()
}

/// Predicts `horizon` frames from one clip's context, checking the context
/// length against the checkpoint's training configuration.
pub fn predict(ckpt: &Checkpoint, context_frames: &[&[u8]], horizon: usize) -> Result<Vec<Vec<f32>>> {
    if context_frames.len() != ckpt.config.data.context {
        return Err(MipaeError::config(format!(
            "got {} context frames, the model was trained with {}",
            context_frames.len(),
            ckpt.config.data.context
        )));
    }
    let frame_len = ckpt.config.net.frame_size.pow(2) * ckpt.config.net.channels;
    if let Some(f) = context_frames.iter().find(|f| f.len() != frame_len) {
        return Err(MipaeError::Shape { op: "predict", detail: format!("frame of {} values, expected {frame_len}", f.len()) });
    }
    Ok(predict_clips(&ckpt.networks, &[context_frames.to_vec()], horizon)?.remove(0))
}
