//! Loss terms for the main networks, the critic and the adversarial baseline.

use mipae_tensor::{Adam, AdamConfig, Mode, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MipaeError, Result};
use crate::nets::{Critic, NetConfig};

/// Default ceiling applied to critic outputs before exponentiation.
pub const EXP_CEILING: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the content similarity term.
    pub alpha: f64,
    /// Weight of the pose mutual-information term.
    pub beta: f64,
    /// Largest temporal offset between paired frames; `None` uses `clip_len - 1`.
    pub max_offset: Option<usize>,
    pub exp_ceiling: f64,
    pub critic_steps_per_main_step: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1e-4, max_offset: None, exp_ceiling: EXP_CEILING, critic_steps_per_main_step: 1 }
    }
}

impl LossWeights {
    /// Checks the weights and resolves the offset bound for clips of `clip_len` frames.
    pub fn resolve_offset(&self, clip_len: usize) -> Result<usize> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(MipaeError::config("alpha and beta must be finite and non-negative"));
        }
        if !(self.exp_ceiling > 0.0) {
            return Err(MipaeError::config("exp_ceiling must be positive"));
        }
        let k = self.max_offset.unwrap_or(clip_len.saturating_sub(1));
        if k == 0 || k + 1 > clip_len {
            return Err(MipaeError::config(format!("max_offset {k} must lie in [1, {}]", clip_len.saturating_sub(1))));
        }
        Ok(k)
    }
}

/// Which term fills the third slot of the main objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Critic-based mutual-information penalty.
    #[default]
    Mipae,
    /// Adversarial same-clip/different-clip discriminator.
    Drnet,
    /// No pose penalty.
    None,
}

impl std::str::FromStr for Baseline {
    type Err = MipaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mipae" => Ok(Self::Mipae),
            "drnet" => Ok(Self::Drnet),
            "none" => Ok(Self::None),
            other => Err(MipaeError::config(format!("unknown baseline {other:?} (expected mipae, drnet or none)"))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mipae => "mipae",
            Self::Drnet => "drnet",
            Self::None => "none",
        })
    }
}

/// Pose-code pairs for one batch.
///
/// Row `i` of the anchor codes comes from clip `clips[i]` at some time `t_i`;
/// row `i` of the partner codes comes from the same clip at `t_i + offsets[i]`.
/// Joint pairs are `(anchor[i], partner[i])`, marginal pairs are
/// `(anchor[i], partner[partners[i]])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub clips: Vec<usize>,
    pub offsets: Vec<usize>,
    pub partners: Vec<usize>,
}

impl PairBatch {
    /// Builds a batch with a random single-cycle pairing, so that no row is
    /// paired with itself. `clips` must be distinct.
    pub fn new<R: Rng + ?Sized>(clips: Vec<usize>, offsets: Vec<usize>, rng: &mut R) -> Result<Self> {
        let n = clips.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut partners = vec![0; n];
        for i in 0..n {
            partners[order[i]] = order[(i + 1) % n];
        }
        let batch = Self { clips, offsets, partners };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.clips.len();
        let bad = |d: String| Err(MipaeError::Shape { op: "pair batch", detail: d });
        if n < 2 {
            return bad(format!("need at least two clips, got {n}"));
        }
        if self.offsets.len() != n || self.partners.len() != n {
            return bad("clips, offsets and partners differ in length".into());
        }
        if let Some(i) = self.offsets.iter().position(|&k| k == 0) {
            return bad(format!("pair {i} has zero offset"));
        }
        for (i, &j) in self.partners.iter().enumerate() {
            if j >= n || self.clips[j] == self.clips[i] {
                return bad(format!("marginal pair {i} -> {j} does not cross clips"));
            }
        }
        Ok(())
    }
}

/// Critic outputs on the joint and marginal pairs of a batch.
#[derive(Debug, Clone, Copy)]
pub struct PairLogits {
    pub joint: Var,
    pub marginal: Var,
}

/// Scores joint and marginal pairs. `mode.grad` controls whether the critic's
/// parameters receive gradients.
pub fn pair_logits<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &Critic<T>,
    anchor: Var,
    partner: Var,
    pairs: &PairBatch,
    mode: Mode,
) -> PairLogits {
    let shuffled = tape.select_rows(partner, &pairs.partners);
    let joint = critic.forward(tape, anchor, partner, mode);
    let marginal = critic.forward(tape, anchor, shuffled, mode);
    PairLogits { joint, marginal }
}

/// Mean squared error over every element.
pub fn recon_loss<T: Scalar>(tape: &mut Tape<T>, decoded: Var, target: Var) -> Result<Var> {
    if tape.shape(decoded) != tape.shape(target) {
        return Err(MipaeError::Shape {
            op: "recon_loss",
            detail: format!("{:?} vs {:?}", tape.shape(decoded), tape.shape(target)),
        });
    }
    let d = tape.sub(decoded, target);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Batch mean of the squared distance between paired content codes `[B, D]`.
pub fn sim_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    let per_row = tape.sum_rows(sq);
    tape.mean(per_row)
}

/// Discriminator objective to be maximised:
/// `mean log σ(joint) + mean log(1 - σ(marginal))`.
pub fn critic_objective<T: Scalar>(tape: &mut Tape<T>, logits: PairLogits) -> Var {
    let neg = tape.scale(logits.joint, -1.0);
    let a = tape.softplus(neg);
    let a = tape.mean(a);
    let b = tape.softplus(logits.marginal);
    let b = tape.mean(b);
    let s = tape.add(a, b);
    tape.scale(s, -1.0)
}

/// Variational bound `mean(joint) - mean(exp(min(marginal, ceiling)))`.
pub fn mi_lower_bound<T: Scalar>(tape: &mut Tape<T>, logits: PairLogits, ceiling: f64) -> Var {
    let j = tape.mean(logits.joint);
    let m = tape.clamp_max(logits.marginal, ceiling);
    let m = tape.exp(m);
    let m = tape.mean(m);
    tape.sub(j, m)
}

/// Loss terms of one main-network step.
#[derive(Debug, Clone, Copy)]
pub struct MainTerms {
    pub recon: Var,
    pub sim: Var,
    /// Pose penalty: the MI bound, the adversarial encoder loss, or absent.
    pub pose: Option<Var>,
}

/// `recon + alpha * sim + beta * pose`.
pub fn main_objective<T: Scalar>(tape: &mut Tape<T>, terms: MainTerms, w: &LossWeights) -> Var {
    let s = tape.scale(terms.sim, w.alpha);
    let mut total = tape.add(terms.recon, s);
    if let Some(p) = terms.pose {
        let p = tape.scale(p, w.beta);
        total = tape.add(total, p);
    }
    total
}

/// Scalar form of [`main_objective`].
pub fn weighted_total(recon: f64, sim: f64, pose: f64, w: &LossWeights) -> f64 {
    recon + w.alpha * sim + w.beta * pose
}

/// Adversarial baseline losses `(discriminator, encoder)`.
///
/// The discriminator minimises binary cross-entropy with joint pairs labelled
/// 1 and marginal pairs 0. The encoder minimises cross-entropy against 0.5 on
/// every pair, whose minimum `ln 2` is reached at output probability 0.5.
pub fn adversarial_pose_loss<T: Scalar>(tape: &mut Tape<T>, logits: PairLogits) -> (Var, Var) {
    let obj = critic_objective(tape, logits);
    let disc = tape.scale(obj, -1.0);
    let half_bce = |tape: &mut Tape<T>, y: Var| {
        let pos = tape.softplus(y);
        let neg = tape.scale(y, -1.0);
        let neg = tape.softplus(neg);
        let s = tape.add(pos, neg);
        let s = tape.mean(s);
        tape.scale(s, 0.5)
    };
    let a = half_bce(tape, logits.joint);
    let b = half_bce(tape, logits.marginal);
    let sum = tape.add(a, b);
    let enc = tape.scale(sum, 0.5);
    (disc, enc)
}

/// One ascent step of the critic on fixed pose codes. Returns the objective
/// value before the update.
pub fn critic_step<T: Scalar>(
    critic: &mut Critic<T>,
    opt: &mut Adam<T>,
    anchor: &Tensor<T>,
    partner: &Tensor<T>,
    pairs: &PairBatch,
) -> f64 {
    let mut tape = Tape::new();
    let (a, p) = (tape.constant(anchor.clone()), tape.constant(partner.clone()));
    let logits = pair_logits(&mut tape, critic, a, p, pairs, Mode::TRAIN);
    let obj = critic_objective(&mut tape, logits);
    let loss = tape.scale(obj, -1.0);
    let grads = tape.backward(loss);
    let g = grads.for_store(&critic.store);
    opt.step(&mut critic.store, &g);
    tape.item(obj).as_f64()
}

/// Evaluates the MI bound of `critic` on fixed codes without touching it.
pub fn evaluate_bound<T: Scalar>(critic: &Critic<T>, anchor: &Tensor<T>, partner: &Tensor<T>, pairs: &PairBatch, ceiling: f64) -> f64 {
    let mut tape = Tape::new();
    let (a, p) = (tape.constant(anchor.clone()), tape.constant(partner.clone()));
    let logits = pair_logits(&mut tape, critic, a, p, pairs, Mode::EVAL);
    let b = mi_lower_bound(&mut tape, logits, ceiling);
    tape.item(b).as_f64()
}

/// Settings for [`critic_probe`].
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch: usize,
    pub eval_samples: usize,
    pub hidden: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 256,
            eval_samples: 20_000,
            hidden: 64,
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            seed: 0,
        }
    }
}

/// Trains a fresh critic on pose pairs drawn by `sample(rng, n) -> (a, b)`
/// (row `i` of `a` and `b` forming a joint pair) and returns the MI bound on
/// a held-out draw.
pub fn critic_probe<F>(pose_dim: usize, cfg: &ProbeConfig, mut sample: F) -> f64
where
    F: FnMut(&mut ChaCha8Rng, usize) -> (Tensor<f32>, Tensor<f32>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = NetConfig { pose_dim, critic_hidden: cfg.hidden, ..NetConfig::default() };
    let mut critic = Critic::<f32>::new("probe_critic", &net, &mut rng);
    let mut opt = Adam::new(cfg.optimizer);
    for _ in 0..cfg.steps {
        let (a, b) = sample(&mut rng, cfg.batch);
        let pairs = PairBatch::new((0..cfg.batch).collect(), vec![1; cfg.batch], &mut rng).expect("probe batch");
        critic_step(&mut critic, &mut opt, &a, &b, &pairs);
    }
    let (a, b) = sample(&mut rng, cfg.eval_samples);
    let pairs = PairBatch::new((0..cfg.eval_samples).collect(), vec![1; cfg.eval_samples], &mut rng).expect("probe batch");
    evaluate_bound(&critic, &a, &b, &pairs, EXP_CEILING)
}

/// Draws `n` pairs of `dim`-dimensional standard normal codes whose matching
/// coordinates have correlation `rho`.
pub fn correlated_gaussian_pairs(rng: &mut ChaCha8Rng, n: usize, dim: usize, rho: f64) -> (Tensor<f32>, Tensor<f32>) {
    let a = Tensor::<f64>::randn(&[n, dim], 1.0, rng);
    let e = Tensor::<f64>::randn(&[n, dim], 1.0, rng);
    let s = (1.0 - rho * rho).sqrt();
    let b = a.zip_map(&e, |x, y| rho * x + s * y).expect("same shape");
    (a.cast(), b.cast())
}
