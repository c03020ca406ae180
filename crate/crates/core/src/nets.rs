//! The five trainable components: content encoder, pose encoder, decoder,
//! critic and recurrent pose predictor.

use mipae_tensor::{BatchNorm, Conv2d, ConvTranspose2d, Init, Linear, LstmCell, LstmState, Mode, ParamStore, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipaeError, Result};

/// Spatial size of the deepest encoder feature map.
pub const FINAL_MAP: usize = 4;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub content_dim: usize,
    pub pose_dim: usize,
    pub base_channels: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub use_skip_connections: bool,
    pub critic_hidden: usize,
    pub critic_layers: usize,
    pub lstm_cells: usize,
    pub lstm_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            content_dim: 128,
            pose_dim: 5,
            base_channels: 64,
            frame_size: 64,
            channels: 1,
            use_skip_connections: false,
            critic_hidden: 512,
            critic_layers: 2,
            lstm_cells: 256,
            lstm_layers: 2,
        }
    }
}

impl NetConfig {
    /// Number of stride-2 stages from the frame down to [`FINAL_MAP`].
    pub fn levels(&self) -> Result<usize> {
        let ratio = self.frame_size / FINAL_MAP;
        if self.frame_size % FINAL_MAP != 0 || !ratio.is_power_of_two() || ratio < 2 {
            return Err(MipaeError::config(format!(
                "frame_size {} must be {FINAL_MAP} times a power of two (>= {})",
                self.frame_size,
                2 * FINAL_MAP
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        let dims = [self.content_dim, self.pose_dim, self.base_channels, self.channels, self.critic_hidden, self.lstm_cells, self.lstm_layers];
        if dims.contains(&0) {
            return Err(MipaeError::config("network dimensions must be positive"));
        }
        if self.pose_dim >= self.content_dim {
            return Err(MipaeError::config(format!(
                "pose_dim ({}) must be smaller than content_dim ({})",
                self.pose_dim, self.content_dim
            )));
        }
        Ok(())
    }

    fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Output of an encoder: the code and, per stage, the feature map it produced.
pub struct Encoded {
    pub code: Var,
    pub features: Vec<Var>,
}

/// Strided-convolution encoder ending in a batch-normalized `tanh` code.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub store: ParamStore<T>,
    stages: Vec<(Conv2d, BatchNorm)>,
    head: Conv2d,
    head_norm: BatchNorm,
    pub out_dim: usize,
}

impl<T: Scalar> Encoder<T> {
    fn new(name: &str, cfg: &NetConfig, out_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(name);
        let mut stages = Vec::new();
        let mut in_ch = cfg.channels;
        for level in 0..cfg.levels()? {
            let out = cfg.stage_channels(level);
            let conv = Conv2d::new(&mut store, &format!("conv{level}"), in_ch, out, 4, 2, 1, false, rng);
            let bn = BatchNorm::new(&mut store, &format!("bn{level}"), out, rng);
            stages.push((conv, bn));
            in_ch = out;
        }
        let head = Conv2d::new(&mut store, "head", in_ch, out_dim, FINAL_MAP, 1, 0, false, rng);
        let head_norm = BatchNorm::new(&mut store, "head_bn", out_dim, rng);
        Ok(Self { store, stages, head, head_norm, out_dim })
    }

    /// `frames[B, C, H, W]` to codes `[B, out_dim]` in `(-1, 1)`.
    pub fn forward(&self, tape: &mut Tape<T>, frames: Var, mode: Mode) -> Encoded {
        let mut h = frames;
        let mut features = Vec::with_capacity(self.stages.len());
        for (conv, bn) in &self.stages {
            h = conv.forward(tape, &self.store, h, mode);
            h = bn.forward(tape, &self.store, h, mode);
            h = tape.leaky_relu(h, LEAK);
            features.push(h);
        }
        let h = self.head.forward(tape, &self.store, h, mode);
        let h = self.head_norm.forward(tape, &self.store, h, mode);
        let h = tape.tanh(h);
        let b = tape.shape(h)[0];
        let code = tape.reshape(h, &[b, self.out_dim]);
        Encoded { code, features }
    }

    pub fn encode(&self, tape: &mut Tape<T>, frames: Var, mode: Mode) -> Var {
        self.forward(tape, frames, mode).code
    }
}

/// Mirror of the encoder with transposed convolutions and a sigmoid output.
#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar> {
    pub store: ParamStore<T>,
    stem: ConvTranspose2d,
    stem_norm: BatchNorm,
    stages: Vec<(ConvTranspose2d, Option<BatchNorm>)>,
    skips: bool,
    latent_dim: usize,
}

impl<T: Scalar> Decoder<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels()?;
        let mut store = ParamStore::new("decoder");
        let latent_dim = cfg.content_dim + cfg.pose_dim;
        let top = cfg.stage_channels(levels - 1);
        let stem = ConvTranspose2d::new(&mut store, "stem", latent_dim, top, FINAL_MAP, 1, 0, false, rng);
        let stem_norm = BatchNorm::new(&mut store, "stem_bn", top, rng);
        let widen = if cfg.use_skip_connections { 2 } else { 1 };
        let mut stages = Vec::new();
        for level in (0..levels).rev() {
            let in_ch = cfg.stage_channels(level) * widen;
            let last = level == 0;
            let out = if last { cfg.channels } else { cfg.stage_channels(level - 1) };
            let conv = ConvTranspose2d::new(&mut store, &format!("up{level}"), in_ch, out, 4, 2, 1, last, rng);
            let bn = (!last).then(|| BatchNorm::new(&mut store, &format!("bn{level}"), out, rng));
            stages.push((conv, bn));
        }
        Ok(Self { store, stem, stem_norm, stages, skips: cfg.use_skip_connections, latent_dim })
    }

    /// `(z_c[B, dc], z_p[B, dp])` to frames `[B, C, H, W]` in `[0, 1]`.
    ///
    /// `skips` are the content encoder's stage features (shallowest first) and
    /// are required exactly when the decoder was built with skip connections.
    pub fn forward(&self, tape: &mut Tape<T>, z_c: Var, z_p: Var, skips: Option<&[Var]>, mode: Mode) -> Var {
        let z = tape.concat1(&[z_c, z_p]);
        let b = tape.shape(z)[0];
        let z = tape.reshape(z, &[b, self.latent_dim, 1, 1]);
        let mut h = self.stem.forward(tape, &self.store, z, mode);
        h = self.stem_norm.forward(tape, &self.store, h, mode);
        h = tape.relu(h);
        let n = self.stages.len();
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            if self.skips {
                let feats = skips.expect("decoder built with skip connections needs encoder features");
                h = tape.concat1(&[h, feats[n - 1 - i]]);
            }
            h = conv.forward(tape, &self.store, h, mode);
            h = match bn {
                Some(bn) => {
                    let h = bn.forward(tape, &self.store, h, mode);
                    tape.relu(h)
                }
                None => tape.sigmoid(h),
            };
        }
        h
    }

    pub fn uses_skips(&self) -> bool {
        self.skips
    }
}

/// MLP scoring a pair of pose codes; raw logit output.
#[derive(Debug, Clone)]
pub struct Critic<T: Scalar> {
    pub store: ParamStore<T>,
    hidden: Vec<Linear>,
    out: Linear,
    pub pose_dim: usize,
}

impl<T: Scalar> Critic<T> {
    pub fn new(name: &str, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new(name);
        let mut hidden = Vec::new();
        let mut width = 2 * cfg.pose_dim;
        for i in 0..cfg.critic_layers {
            hidden.push(Linear::new(&mut store, &format!("fc{i}"), width, cfg.critic_hidden, Init::FanIn, rng));
            width = cfg.critic_hidden;
        }
        let out = Linear::new(&mut store, "out", width, 1, Init::Zeros, rng);
        Self { store, hidden, out, pose_dim: cfg.pose_dim }
    }

    /// Logits `[B]` for pairs `(a[B, dp], b[B, dp])`.
    pub fn forward(&self, tape: &mut Tape<T>, a: Var, b: Var, mode: Mode) -> Var {
        let mut h = tape.concat1(&[a, b]);
        for layer in &self.hidden {
            h = layer.forward(tape, &self.store, h, mode);
            h = tape.relu(h);
        }
        let y = self.out.forward(tape, &self.store, h, mode);
        let n = tape.shape(y)[0];
        tape.reshape(y, &[n])
    }
}

/// Recurrent state of the pose predictor, one entry per LSTM layer.
#[derive(Debug, Clone)]
pub struct PredictorState(pub Vec<LstmState>);

/// Linear embedding, stacked LSTM cells, linear read-out.
#[derive(Debug, Clone)]
pub struct PosePredictor<T: Scalar> {
    pub store: ParamStore<T>,
    embed: Linear,
    cells: Vec<LstmCell>,
    out: Linear,
}

impl<T: Scalar> PosePredictor<T> {
    fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new("predictor");
        let embed = Linear::new(&mut store, "embed", cfg.content_dim + cfg.pose_dim, cfg.lstm_cells, Init::FanIn, rng);
        let cells = (0..cfg.lstm_layers)
            .map(|i| LstmCell::new(&mut store, &format!("lstm{i}"), cfg.lstm_cells, cfg.lstm_cells, rng))
            .collect();
        let out = Linear::new(&mut store, "out", cfg.lstm_cells, cfg.pose_dim, Init::FanIn, rng);
        Self { store, embed, cells, out }
    }

    pub fn zero_state(&self, tape: &mut Tape<T>, batch: usize) -> PredictorState {
        PredictorState(self.cells.iter().map(|c| c.zero_state(tape, batch)).collect())
    }

    /// One step: `(z_c, previous pose, state)` to `(next pose, state)`.
    pub fn step(&self, tape: &mut Tape<T>, z_c: Var, pose: Var, state: &PredictorState, mode: Mode) -> (Var, PredictorState) {
        let x = tape.concat1(&[z_c, pose]);
        let mut h = self.embed.forward(tape, &self.store, x, mode);
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, s) in self.cells.iter().zip(&state.0) {
            let ns = cell.forward(tape, &self.store, h, *s, mode);
            h = ns.h;
            next.push(ns);
        }
        (self.out.forward(tape, &self.store, h, mode), PredictorState(next))
    }
}

pub fn build_content_encoder<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Encoder<T>> {
    Encoder::new("content_encoder", cfg, cfg.content_dim, rng)
}

pub fn build_pose_encoder<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Encoder<T>> {
    Encoder::new("pose_encoder", cfg, cfg.pose_dim, rng)
}

pub fn build_decoder<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Decoder<T>> {
    Decoder::new(cfg, rng)
}

pub fn build_critic<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Critic<T> {
    Critic::new("critic", cfg, rng)
}

pub fn build_pose_predictor<T: Scalar>(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> PosePredictor<T> {
    PosePredictor::new(cfg, rng)
}

/// All parametric components of the model.
#[derive(Debug, Clone)]
pub struct Networks<T: Scalar> {
    pub config: NetConfig,
    pub content: Encoder<T>,
    pub pose: Encoder<T>,
    pub decoder: Decoder<T>,
    pub critic: Critic<T>,
    pub predictor: PosePredictor<T>,
}

impl<T: Scalar> Networks<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: cfg.clone(),
            content: build_content_encoder(cfg, &mut rng)?,
            pose: build_pose_encoder(cfg, &mut rng)?,
            decoder: build_decoder(cfg, &mut rng)?,
            critic: build_critic(cfg, &mut rng),
            predictor: build_pose_predictor(cfg, &mut rng),
        })
    }

    pub fn stores(&self) -> [&ParamStore<T>; 5] {
        [&self.content.store, &self.pose.store, &self.decoder.store, &self.critic.store, &self.predictor.store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 5] {
        [
            &mut self.content.store,
            &mut self.pose.store,
            &mut self.decoder.store,
            &mut self.critic.store,
            &mut self.predictor.store,
        ]
    }

    /// Decodes frames through both encoders: `D(E_c(x), E_p(x))`.
    pub fn reconstruct(&self, tape: &mut Tape<T>, frames: Var, mode: Mode) -> Var {
        let c = self.content.forward(tape, frames, mode);
        let p = self.pose.encode(tape, frames, mode);
        self.decoder.forward(tape, c.code, p, Some(&c.features), mode)
    }
}

/// Content and pose codes of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle<T> {
    /// `[content_dim]`
    pub z_c: Tensor<T>,
    /// `[len, pose_dim]`
    pub z_p: Tensor<T>,
    /// `[T, pose_dim]` when a rollout was run.
    pub z_p_hat: Option<Tensor<T>>,
}

impl<T: Scalar> LatentBundle<T> {
    pub fn is_finite(&self) -> bool {
        self.z_c.all_finite() && self.z_p.all_finite() && self.z_p_hat.as_ref().is_none_or(|t| t.all_finite())
    }
}

/// Stacks 8-bit frames (`H x W x C`, `C = 1` here) into `[B, C, H, W]` in `[0, 1]`.
pub fn frames_tensor<T: Scalar>(frames: &[&[u8]], size: usize, channels: usize) -> Tensor<T> {
    let per = size * size * channels;
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let mut data = Vec::with_capacity(frames.len() * per);
    for f in frames {
        assert_eq!(f.len(), per, "frame size");
        if channels == 1 {
            data.extend(f.iter().map(|&b| T::from_u8(b).unwrap() * scale));
        } else {
            for c in 0..channels {
                data.extend(f.iter().skip(c).step_by(channels).map(|&b| T::from_u8(b).unwrap() * scale));
            }
        }
    }
    Tensor::from_vec(&[frames.len(), channels, size, size], data).expect("frame tensor")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig { content_dim: 16, pose_dim: 3, base_channels: 4, frame_size: 16, critic_hidden: 8, lstm_cells: 6, ..Default::default() }
    }

    #[test]
    fn frame_size_must_be_power_of_two_multiple() {
        for bad in [12, 24, 48, 4, 65] {
            let c = NetConfig { frame_size: bad, ..Default::default() };
            assert!(c.validate().is_err(), "{bad}");
        }
        assert_eq!(NetConfig::default().levels().unwrap(), 4);
    }

    #[test]
    fn default_content_code_has_128_dims() {
        let cfg = NetConfig { base_channels: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_content_encoder::<f32>(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 64, 64], 0.3));
        let z = enc.encode(&mut tape, x, Mode::TRAIN);
        assert_eq!(tape.shape(z), &[2, 128]);
    }

    #[test]
    fn reconstruction_preserves_shape_and_range() {
        let nets = Networks::<f64>::new(&tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::uniform(&[3, 1, 16, 16], 1.0, &mut rng).map(|v| v.abs()));
        let y = nets.reconstruct(&mut tape, x, Mode::TRAIN);
        assert_eq!(tape.shape(y), &[3, 1, 16, 16]);
        assert!(tape.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn skip_connections_change_decoder_inputs() {
        let cfg = NetConfig { use_skip_connections: true, ..tiny_cfg() };
        let nets = Networks::<f32>::new(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 16, 16], 0.5));
        let y = nets.reconstruct(&mut tape, x, Mode::TRAIN);
        assert_eq!(tape.shape(y), &[2, 1, 16, 16]);
    }

    #[test]
    fn decoder_size_is_comparable_to_encoder() {
        let cfg = NetConfig { base_channels: 16, ..Default::default() };
        let nets = Networks::<f32>::new(&cfg, 0).unwrap();
        let (e, d) = (nets.content.store.num_trainable() as f64, nets.decoder.store.num_trainable() as f64);
        assert!(d / e < 2.0 && e / d < 2.0, "encoder {e} decoder {d}");
    }

    #[test]
    fn critic_starts_at_zero() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let critic = build_critic::<f64>(&cfg, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let y = critic.forward(&mut tape, a, b, Mode::EVAL);
        assert_eq!(tape.shape(y), &[5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_rollout_threads_state() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = build_pose_predictor::<f64>(&cfg, &mut rng);
        let mut tape = Tape::new();
        let zc = tape.constant(Tensor::zeros(&[2, cfg.content_dim]));
        let p0 = tape.constant(Tensor::zeros(&[2, cfg.pose_dim]));
        let s0 = pred.zero_state(&mut tape, 2);
        let (a, _) = pred.step(&mut tape, zc, p0, &s0, Mode::EVAL);
        let (b, _) = pred.step(&mut tape, zc, p0, &s0, Mode::EVAL);
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(tape.shape(a), &[2, cfg.pose_dim]);
        assert!(tape.value(a).all_finite());

        let mut pose = p0;
        let mut state = s0;
        let mut outs = Vec::new();
        for _ in 0..10 {
            let (p, s) = pred.step(&mut tape, zc, pose, &state, Mode::EVAL);
            outs.push(tape.value(p).clone());
            (pose, state) = (p, s);
        }
        assert_eq!(outs.len(), 10);
        // the hidden state carries over, so repeated zero input does not repeat the output
        assert_ne!(outs[0], outs[1]);
    }
}
