//! Seeded moving-sprite videos with known generative factors.
//!
//! Each clip shows one or two sprites (square, ellipse or triangle) with a
//! fixed shape, scale and orientation, moving at constant speed and bouncing
//! off the frame edges. Content factors are constant per clip; position is the
//! only thing that changes over time.

mod dynamics;
pub(crate) mod io;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipaeError, Result};
use crate::exec;

pub use dynamics::{step_dynamics, trajectory, Bounds};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use render::{
    orientation_angle, render_frame, sprite_radius, ShapeKind, SpriteState, MAX_SPRITE_RADIUS, NUM_ORIENTATIONS,
    NUM_SCALES, NUM_SHAPES,
};
pub(crate) use render::weighted_centroid;

/// Whether sprites move or stay put.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    #[default]
    Moving,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_sequences: usize,
    /// Context frames `C`.
    pub context: usize,
    /// Predicted frames `T`.
    pub horizon: usize,
    pub frame_size: usize,
    pub num_objects: usize,
    /// Speed in frame fractions per step, sampled uniformly.
    pub speed_range: [f64; 2],
    pub seed: u64,
    /// Extra padding (frame fraction) added to each sprite's radius when
    /// computing its reflection bounds.
    pub margin: f64,
    pub motion: Motion,
    /// Factor values to sample from; default to the full ranges.
    pub shapes: Vec<usize>,
    pub scales: Vec<usize>,
    pub orientations: Vec<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_sequences: 2000,
            context: 5,
            horizon: 10,
            frame_size: 64,
            num_objects: 1,
            speed_range: [0.02, 0.06],
            seed: 0,
            margin: 0.0,
            motion: Motion::Moving,
            shapes: (0..NUM_SHAPES).collect(),
            scales: (0..NUM_SCALES).collect(),
            orientations: (0..NUM_ORIENTATIONS).collect(),
        }
    }
}

impl DatasetConfig {
    pub fn clip_len(&self) -> usize {
        self.context + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MipaeError::config(m));
        if self.context < 1 || self.horizon < 1 {
            return fail(format!("context ({}) and horizon ({}) must be >= 1", self.context, self.horizon));
        }
        if self.frame_size < 16 {
            return fail(format!("frame_size {} < 16", self.frame_size));
        }
        if !(1..=2).contains(&self.num_objects) {
            return fail(format!("num_objects must be 1 or 2, got {}", self.num_objects));
        }
        let [lo, hi] = self.speed_range;
        if self.motion == Motion::Moving && !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return fail(format!("speed_range [{lo}, {hi}] must lie inside (0, 0.5)"));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return fail(format!("margin {} outside [0, 0.5)", self.margin));
        }
        let check = |name: &str, v: &[usize], n: usize| {
            if v.is_empty() || v.iter().any(|&x| x >= n) {
                Err(MipaeError::config(format!("{name} must be a non-empty subset of 0..{n}, got {v:?}")))
            } else {
                Ok(())
            }
        };
        check("shapes", &self.shapes, NUM_SHAPES)?;
        check("scales", &self.scales, NUM_SCALES)?;
        check("orientations", &self.orientations, NUM_ORIENTATIONS)?;
        for &s in &self.scales {
            if 2.0 * (sprite_radius(s) + self.margin) >= 1.0 {
                return fail(format!("sprite scale {s} with margin {} does not fit the frame", self.margin));
            }
        }
        Ok(())
    }

    /// Reflection bounds for a sprite of the given scale.
    pub fn bounds(&self, scale_id: usize) -> Bounds {
        let r = sprite_radius(scale_id) + self.margin;
        Bounds::new(r, 1.0 - r)
    }

    /// Seed of the `index`-th clip of a dataset built from this config.
    pub fn sequence_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
    }
}

/// True generative factors of one sprite over a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTrack {
    pub shape_id: usize,
    pub scale_id: usize,
    pub orient_id: usize,
    /// Normalized `(x, y)` per frame.
    pub positions: Vec<[f64; 2]>,
    /// Velocity in effect when arriving at each frame; the first entry is the
    /// sampled initial velocity.
    pub velocities: Vec<[f64; 2]>,
}

impl FactorTrack {
    pub fn velocity(&self) -> [f64; 2] {
        self.velocities[0]
    }

    pub fn state(&self, t: usize) -> SpriteState {
        SpriteState { shape_id: self.shape_id, scale_id: self.scale_id, orient_id: self.orient_id, pos: self.positions[t] }
    }

    /// Content factors flattened into a single label in `0..3*6*40`.
    pub fn content_label(&self) -> usize {
        (self.shape_id * NUM_SCALES + self.scale_id) * NUM_ORIENTATIONS + self.orient_id
    }
}

/// One clip: `len x size x size x 1` frames stored as 8-bit intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<u8>,
    pub len: usize,
    pub size: usize,
    pub tracks: Vec<FactorTrack>,
    pub seed: u64,
}

pub const CHANNELS: usize = 1;

impl VideoSequence {
    pub fn frame_len(&self) -> usize {
        self.size * self.size * CHANNELS
    }

    pub fn frame_u8(&self, t: usize) -> &[u8] {
        &self.frames[t * self.frame_len()..(t + 1) * self.frame_len()]
    }

    /// Frame `t` as intensities in `[0, 1]`.
    pub fn frame(&self, t: usize) -> Vec<f32> {
        self.frame_u8(t).iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn track(&self) -> &FactorTrack {
        &self.tracks[0]
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Samples factors from a seeded RNG, rolls the dynamics and renders every frame.
pub fn generate_sequence(seed: u64, config: &DatasetConfig) -> Result<VideoSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = config.clip_len();
    let pick = |rng: &mut ChaCha8Rng, v: &[usize]| v[rng.gen_range(0..v.len())];
    let mut tracks = Vec::with_capacity(config.num_objects);
    for _ in 0..config.num_objects {
        let shape_id = pick(&mut rng, &config.shapes);
        let scale_id = pick(&mut rng, &config.scales);
        let orient_id = pick(&mut rng, &config.orientations);
        let bounds = config.bounds(scale_id);
        let start = [rng.gen_range(bounds.lo..=bounds.hi), rng.gen_range(bounds.lo..=bounds.hi)];
        let vel = match config.motion {
            Motion::Static => [0.0, 0.0],
            Motion::Moving => {
                let [lo, hi] = config.speed_range;
                let speed = if lo < hi { rng.gen_range(lo..hi) } else { lo };
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                [speed * angle.cos(), speed * angle.sin()]
            }
        };
        let (positions, velocities) = trajectory(start, vel, bounds, len);
        tracks.push(FactorTrack { shape_id, scale_id, orient_id, positions, velocities });
    }
    let size = config.frame_size;
    let mut frames = Vec::with_capacity(len * size * size);
    for t in 0..len {
        let states: Vec<SpriteState> = tracks.iter().map(|tr| tr.state(t)).collect();
        frames.extend(render_frame(&states, size)?.into_iter().map(quantize));
    }
    Ok(VideoSequence { frames, len, size, tracks, seed })
}

/// Anything that can serve clips for training and evaluation.
pub trait ClipSource: Sync {
    fn num_clips(&self) -> usize;
    fn clip(&self, index: usize) -> &VideoSequence;
    fn clip_len(&self) -> usize;
    fn frame_size(&self) -> usize;
    fn context(&self) -> usize;
    fn horizon(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub sequences: Vec<VideoSequence>,
}

impl Dataset {
    /// Generates `config.num_sequences` clips, in parallel when enabled.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let sequences = exec::map_indices(config.num_sequences, |i| generate_sequence(config.sequence_seed(i), config))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits off the last `n` clips (e.g. as a validation set).
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.sequences.len());
        let tail = self.sequences.split_off(self.sequences.len() - n);
        let mut tail_cfg = self.config.clone();
        tail_cfg.num_sequences = tail.len();
        self.config.num_sequences = self.sequences.len();
        (self, Dataset { config: tail_cfg, sequences: tail })
    }
}

impl ClipSource for Dataset {
    fn num_clips(&self) -> usize {
        self.sequences.len()
    }

    fn clip(&self, index: usize) -> &VideoSequence {
        &self.sequences[index]
    }

    fn clip_len(&self) -> usize {
        self.config.clip_len()
    }

    fn frame_size(&self) -> usize {
        self.config.frame_size
    }

    fn context(&self) -> usize {
        self.config.context
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { num_sequences: 8, frame_size: 32, ..Default::default() }
    }

    #[test]
    fn same_seed_same_sequence() {
        let c = small();
        assert_eq!(generate_sequence(0, &c).unwrap(), generate_sequence(0, &c).unwrap());
        assert_ne!(generate_sequence(0, &c).unwrap(), generate_sequence(1, &c).unwrap());
    }

    #[test]
    fn track_invariants_hold() {
        let c = DatasetConfig { num_objects: 2, ..small() };
        for seed in 0..20 {
            let s = generate_sequence(seed, &c).unwrap();
            assert_eq!(s.len, c.clip_len());
            assert_eq!(s.frames.len(), s.len * s.frame_len());
            for tr in &s.tracks {
                assert_eq!(tr.positions.len(), s.len);
                let b = c.bounds(tr.scale_id);
                assert!(tr.positions.iter().all(|&p| b.contains(p)));
                let speed = |v: [f64; 2]| v[0].hypot(v[1]);
                for t in 0..s.len - 1 {
                    if tr.velocities[t + 1] == tr.velocities[t] {
                        let d = [tr.positions[t + 1][0] - tr.positions[t][0], tr.positions[t + 1][1] - tr.positions[t][1]];
                        assert!((speed(d) - speed(tr.velocity())).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn centroid_tracks_position() {
        let c = DatasetConfig { frame_size: 64, ..small() };
        for seed in 0..10 {
            let s = generate_sequence(seed, &c).unwrap();
            for t in 0..s.len {
                let (cx, cy) = weighted_centroid(&s.frame(t), 64, 0.0).unwrap();
                let p = s.track().positions[t];
                assert!((cx - p[0] * 64.0).abs() < 1.0 && (cy - p[1] * 64.0).abs() < 1.0);
            }
        }
    }

    #[test]
    fn shape_distribution_is_uniform() {
        let c = DatasetConfig { frame_size: 16, context: 1, horizon: 1, scales: vec![0], ..small() };
        let n = 1000;
        let mut counts = [0usize; NUM_SHAPES];
        for i in 0..n {
            counts[generate_sequence(c.sequence_seed(i), &c).unwrap().track().shape_id] += 1;
        }
        let expected = n as f64 / NUM_SHAPES as f64;
        let chi2: f64 = counts.iter().map(|&k| (k as f64 - expected).powi(2) / expected).sum();
        // 2 degrees of freedom, 1% critical value
        assert!(chi2 < 9.21, "chi2 {chi2} counts {counts:?}");
        assert!(counts.iter().all(|&k| (k as f64 / n as f64 - 1.0 / 3.0).abs() < 0.05));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            DatasetConfig { context: 0, ..small() },
            DatasetConfig { frame_size: 8, ..small() },
            DatasetConfig { speed_range: [0.0, 0.1], ..small() },
            DatasetConfig { speed_range: [0.1, 0.6], ..small() },
            DatasetConfig { num_objects: 3, ..small() },
            DatasetConfig { shapes: vec![4], ..small() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn static_clips_do_not_move() {
        let c = DatasetConfig { motion: Motion::Static, speed_range: [0.0, 0.0], ..small() };
        let s = generate_sequence(3, &c).unwrap();
        assert!(s.track().positions.iter().all(|&p| p == s.track().positions[0]));
        assert!((1..s.len).all(|t| s.frame_u8(t) == s.frame_u8(0)));
    }
}
