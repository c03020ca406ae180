use mipae_tensor::{exec, Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::miest::{content_label, mig_score, position_bin, FactorSamples, MigReport, Points, RepSamples, DEFAULT_K};
use crate::nets::{frames_tensor, Networks};
use crate::synthvid::{quantize, render_frame, ClipSource, Dataset, DatasetConfig, SpriteState};
use crate::{MipaeError, Result};

const ENCODE_CHUNK: usize = 256;

/// How MIG samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MigSampling {
    /// Every content class of the dataset config `per_class` times, one
    /// freshly rendered frame each at a uniform position.
    Balanced { per_class: usize },
    /// `frames_per_clip` evenly spaced frames of every clip of a dataset.
    Pooled { frames_per_clip: usize },
}

impl Default for MigSampling {
    fn default() -> Self {
        Self::Balanced { per_class: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MigConfig {
    pub sampling: MigSampling,
    pub k: usize,
    pub seed: u64,
}

impl Default for MigConfig {
    fn default() -> Self {
        Self { sampling: MigSampling::default(), k: DEFAULT_K, seed: 0 }
    }
}

/// Encodes frames with both encoders in eval mode.
pub fn encode_frames(nets: &Networks<f32>, frames: &[Vec<u8>]) -> Result<RepSamples> {
    let (size, ch) = (nets.config.frame_size, nets.config.channels);
    let chunks: Vec<&[Vec<u8>]> = frames.chunks(ENCODE_CHUNK).collect();
    let parts = exec::map_indices(chunks.len(), |i| {
        let refs: Vec<&[u8]> = chunks[i].iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let x = tape.constant(frames_tensor::<f32>(&refs, size, ch));
        let zc = nets.content.encode(&mut tape, x, Mode::EVAL);
        let zp = nets.pose.encode(&mut tape, x, Mode::EVAL);
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        (widen(tape.value(zc).data()), widen(tape.value(zp).data()))
    });
    let (mut c, mut p) = (Vec::new(), Vec::new());
    for (a, b) in parts {
        c.extend(a);
        p.extend(b);
    }
    Ok(RepSamples { content: Points::new(nets.config.content_dim, c)?, pose: Points::new(nets.config.pose_dim, p)? })
}

/// Position bin of a sprite, measured relative to the range its centre can
/// reach so every bin is equally likely under uniform placement.
pub fn pose_label(data: &DatasetConfig, scale_id: usize, pos: [f64; 2]) -> u32 {
    let b = data.bounds(scale_id);
    let rel = |v: f64| if b.hi > b.lo { (v - b.lo) / (b.hi - b.lo) } else { 0.5 };
    position_bin(rel(pos[0]), rel(pos[1]))
}

/// Renders `per_class` single-sprite frames for every content class allowed by
/// `data`, at uniformly drawn positions.
pub fn balanced_frames(data: &DatasetConfig, per_class: usize, seed: u64) -> Result<(FactorSamples, Vec<Vec<u8>>)> {
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::new();
    for &shape_id in &data.shapes {
        for &scale_id in &data.scales {
            let b = data.bounds(scale_id);
            for &orient_id in &data.orientations {
                for _ in 0..per_class {
                    let pos = [rng.gen_range(b.lo..=b.hi), rng.gen_range(b.lo..=b.hi)];
                    states.push(SpriteState { shape_id, scale_id, orient_id, pos });
                }
            }
        }
    }
    let size = data.frame_size;
    let frames = exec::map_indices(states.len(), |i| {
        render_frame(&states[i..=i], size).map(|f| f.into_iter().map(quantize).collect::<Vec<u8>>())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let factors = FactorSamples {
        content: states.iter().map(|s| content_label(s.shape_id, s.scale_id, s.orient_id)).collect(),
        pose: states.iter().map(|s| pose_label(data, s.scale_id, s.pos)).collect(),
    };
    Ok((factors, frames))
}

/// Evenly spaced frames from every clip of a single-object dataset.
pub fn pooled_frames(data: &Dataset, frames_per_clip: usize) -> Result<(FactorSamples, Vec<Vec<u8>>)> {
    let len = data.clip_len();
    if frames_per_clip == 0 || frames_per_clip > len {
        return Err(MipaeError::config(format!("frames_per_clip must lie in 1..={len}")));
    }
    let mut factors = FactorSamples { content: Vec::new(), pose: Vec::new() };
    let mut frames = Vec::new();
    for i in 0..data.num_clips() {
        let clip = data.clip(i);
        if clip.tracks.len() != 1 {
            return Err(MipaeError::config("MIG needs single-object clips"));
        }
        let tr = clip.track();
        for j in 0..frames_per_clip {
            let t = j * len / frames_per_clip;
            factors.content.push(content_label(tr.shape_id, tr.scale_id, tr.orient_id));
            factors.pose.push(pose_label(&data.config, tr.scale_id, tr.positions[t]));
            frames.push(clip.frame_u8(t).to_vec());
        }
    }
    Ok((factors, frames))
}

/// Draws samples per `cfg`, encodes them and scores the gap. `data` supplies
/// clips for pooled sampling and is ignored otherwise.
pub fn evaluate_mig(nets: &Networks<f32>, data_cfg: &DatasetConfig, data: Option<&Dataset>, cfg: &MigConfig) -> Result<MigReport> {
    if data_cfg.num_objects != 1 {
        return Err(MipaeError::config("MIG needs single-object data"));
    }
    let (factors, frames) = match cfg.sampling {
        MigSampling::Balanced { per_class } => {
            if per_class <= cfg.k {
                return Err(MipaeError::config(format!("per_class ({per_class}) must exceed k ({})", cfg.k)));
            }
            balanced_frames(data_cfg, per_class, cfg.seed)?
        }
        MigSampling::Pooled { frames_per_clip } => {
            let data = data.ok_or_else(|| MipaeError::config("pooled MIG sampling needs a dataset"))?;
            pooled_frames(data, frames_per_clip)?
        }
    };
    let reps = encode_frames(nets, &frames)?;
    mig_score(&factors, &reps, cfg.k)
}
