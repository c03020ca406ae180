//! Joint training of the encoders and decoder against the pose critic.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mipae_tensor::{Adam, Mode, Tape, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{Checkpoint, LossStats};
use super::TrainConfig;
use crate::error::{MipaeError, Result};
use crate::nets::{frames_tensor, Networks};
use crate::objectives::{
    adversarial_pose_loss, critic_step, main_objective, mi_lower_bound, pair_logits, recon_loss,
    sim_loss, Baseline, MainTerms, PairBatch,
};
use crate::synthvid::ClipSource;

/// Loss values of one step, as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: u64,
    #[serde(rename = "L_recon")]
    pub recon: f64,
    #[serde(rename = "L_sim")]
    pub sim: f64,
    #[serde(rename = "L_MI")]
    pub mi: f64,
    #[serde(rename = "L_C")]
    pub critic: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [self.recon, self.sim, self.mi, self.critic].iter().all(|v| v.is_finite())
    }
}

/// Frame indices drawn for one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchPlan {
    pub clips: Vec<usize>,
    pub t: Vec<usize>,
    /// Offset of the pose partner frame (`>= 1`).
    pub k_mi: Vec<usize>,
    /// Offset of the content partner frame (`>= 0`).
    pub k_sim: Vec<usize>,
    /// Whether the reconstruction target is the pose partner frame.
    pub cross: Vec<bool>,
}

impl BatchPlan {
    pub fn sample<R: Rng>(rng: &mut R, num_clips: usize, batch: usize, clip_len: usize, max_offset: usize, cross_prob: f64) -> Self {
        let clips = sample(rng, num_clips, batch).into_vec();
        let mut plan = Self { clips, t: vec![], k_mi: vec![], k_sim: vec![], cross: vec![] };
        for _ in 0..batch {
            let k_mi = rng.gen_range(1..=max_offset);
            let k_sim = rng.gen_range(0..=max_offset);
            let t = rng.gen_range(0..clip_len - k_mi.max(k_sim));
            plan.t.push(t);
            plan.k_mi.push(k_mi);
            plan.k_sim.push(k_sim);
            plan.cross.push(rng.gen_bool(cross_prob));
        }
        plan
    }
}

/// Points inside a step at which an observer may inspect the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    Start,
    AfterCritic,
    AfterMain,
}

/// Phase-1 training state over a clip source.
pub struct MainTrainer<'a, S: ClipSource> {
    cfg: TrainConfig,
    data: &'a S,
    pub networks: Networks<f32>,
    opt_content: Adam<f32>,
    opt_pose: Adam<f32>,
    opt_decoder: Adam<f32>,
    opt_critic: Adam<f32>,
    rng: ChaCha8Rng,
    max_offset: usize,
    step: u64,
    pub stats: LossStats,
    pub dump_dir: Option<PathBuf>,
}

impl<'a, S: ClipSource> MainTrainer<'a, S> {
    pub fn new(cfg: &TrainConfig, data: &'a S) -> Result<Self> {
        cfg.validate()?;
        if data.frame_size() != cfg.net.frame_size {
            return Err(MipaeError::config(format!(
                "dataset frames are {}px but the network expects {}px",
                data.frame_size(),
                cfg.net.frame_size
            )));
        }
        let max_offset = cfg.max_offset()?;
        if data.clip_len() < max_offset + 1 {
            return Err(MipaeError::config(format!("clips of {} frames are shorter than max_offset + 1", data.clip_len())));
        }
        if data.num_clips() < cfg.batch_size {
            return Err(MipaeError::config(format!("{} training clips for a batch of {}", data.num_clips(), cfg.batch_size)));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let networks = Networks::new(&cfg.net, seeder.gen())?;
        let rng = ChaCha8Rng::seed_from_u64(seeder.gen());
        Ok(Self {
            cfg: cfg.clone(),
            data,
            networks,
            opt_content: Adam::new(cfg.optimizer),
            opt_pose: Adam::new(cfg.optimizer),
            opt_decoder: Adam::new(cfg.optimizer),
            opt_critic: Adam::new(cfg.optimizer),
            rng,
            max_offset,
            step: 0,
            stats: LossStats::default(),
            dump_dir: None,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn frames(&self, plan: &BatchPlan, offsets: impl Fn(usize) -> usize) -> Vec<&'a [u8]> {
        let data = self.data;
        plan.clips.iter().enumerate().map(|(i, &c)| data.clip(c).frame_u8(plan.t[i] + offsets(i))).collect()
    }

    pub fn step(&mut self) -> Result<StepLosses> {
        self.step_observed(|_, _| {})
    }

    /// One critic update (or several) followed by one update of the encoders
    /// and decoder. `observe` sees the networks at each [`StepPhase`].
    pub fn step_observed(&mut self, mut observe: impl FnMut(StepPhase, &Networks<f32>)) -> Result<StepLosses> {
        observe(StepPhase::Start, &self.networks);
        let cfg = &self.cfg;
        let (b, size, ch) = (cfg.batch_size, cfg.net.frame_size, cfg.net.channels);
        let plan = BatchPlan::sample(&mut self.rng, self.data.num_clips(), b, self.data.clip_len(), self.max_offset, cfg.cross_frame_prob);
        let pairs = PairBatch::new(plan.clips.clone(), plan.k_mi.clone(), &mut self.rng)?;

        let anchors = self.frames(&plan, |_| 0);
        let pose_partners = self.frames(&plan, |i| plan.k_mi[i]);
        let content_partners = self.frames(&plan, |i| plan.k_sim[i]);
        let content_in = frames_tensor::<f32>(&[anchors.clone(), content_partners].concat(), size, ch);
        let pose_in = frames_tensor::<f32>(&[anchors.clone(), pose_partners.clone()].concat(), size, ch);
        let targets: Vec<&[u8]> = (0..b).map(|i| if plan.cross[i] { pose_partners[i] } else { anchors[i] }).collect();
        let target = frames_tensor::<f32>(&targets, size, ch);

        let first: Vec<usize> = (0..b).collect();
        let second: Vec<usize> = (b..2 * b).collect();
        let nets = &self.networks;
        let mut tape = Tape::new();
        let xc = tape.constant(content_in);
        let enc = nets.content.forward(&mut tape, xc, Mode::TRAIN);
        let zc_anchor = tape.select_rows(enc.code, &first);
        let zc_partner = tape.select_rows(enc.code, &second);
        let skips: Vec<Var> = enc.features.iter().map(|&f| tape.select_rows(f, &first)).collect();
        let xp = tape.constant(pose_in);
        let zp_all = nets.pose.encode(&mut tape, xp, Mode::TRAIN);
        let zp_anchor = tape.select_rows(zp_all, &first);
        let zp_partner = tape.select_rows(zp_all, &second);
        let recon_rows: Vec<usize> = (0..b).map(|i| if plan.cross[i] { b + i } else { i }).collect();
        let zp_recon = tape.select_rows(zp_all, &recon_rows);

        // critic ascent on the current pose codes, which are constants here
        let anchor_codes = tape.value(zp_anchor).clone();
        let partner_codes = tape.value(zp_partner).clone();
        let mut critic_value = 0.0;
        for _ in 0..cfg.loss.critic_steps_per_main_step {
            critic_value =
                critic_step(&mut self.networks.critic, &mut self.opt_critic, &anchor_codes, &partner_codes, &pairs);
        }
        observe(StepPhase::AfterCritic, &self.networks);

        let nets = &self.networks;
        let decoded = nets.decoder.forward(&mut tape, zc_anchor, zp_recon, Some(&skips), Mode::TRAIN);
        let xt = tape.constant(target);
        let recon = recon_loss(&mut tape, decoded, xt)?;
        let sim = sim_loss(&mut tape, zc_anchor, zc_partner);
        let frozen_critic = Mode { train: true, grad: false };
        let logits = pair_logits(&mut tape, &nets.critic, zp_anchor, zp_partner, &pairs, frozen_critic);
        let mi = mi_lower_bound(&mut tape, logits, cfg.loss.exp_ceiling);
        let pose = match cfg.baseline {
            Baseline::Mipae => Some(mi),
            Baseline::Drnet => Some(adversarial_pose_loss(&mut tape, logits).1),
            Baseline::None => None,
        };
        let total = main_objective(&mut tape, MainTerms { recon, sim, pose }, &cfg.loss);
        let losses = StepLosses {
            step: self.step + 1,
            recon: tape.item(recon) as f64,
            sim: tape.item(sim) as f64,
            mi: tape.item(mi) as f64,
            critic: critic_value,
        };
        if !losses.all_finite() || !tape.item(total).is_finite() {
            return Err(self.non_finite(&plan, &losses));
        }

        let grads = tape.backward(total);
        let updates = tape.take_stat_updates();
        let g = grads.for_store(&self.networks.content.store);
        self.opt_content.step(&mut self.networks.content.store, &g);
        let g = grads.for_store(&self.networks.pose.store);
        self.opt_pose.step(&mut self.networks.pose.store, &g);
        let g = grads.for_store(&self.networks.decoder.store);
        self.opt_decoder.step(&mut self.networks.decoder.store, &g);
        for store in [&mut self.networks.content.store, &mut self.networks.pose.store, &mut self.networks.decoder.store] {
            store.apply_stat_updates(&updates);
        }
        observe(StepPhase::AfterMain, &self.networks);

        let first = self.step == 0;
        LossStats::smooth(&mut self.stats.recon, losses.recon, first);
        LossStats::smooth(&mut self.stats.sim, losses.sim, first);
        LossStats::smooth(&mut self.stats.mi, losses.mi, first);
        LossStats::smooth(&mut self.stats.critic, losses.critic, first);
        self.step += 1;
        Ok(losses)
    }

    fn non_finite(&self, plan: &BatchPlan, losses: &StepLosses) -> MipaeError {
        #[derive(Serialize)]
        struct Dump<'p> {
            step: u64,
            losses: &'p StepLosses,
            batch: &'p BatchPlan,
        }
        let mut detail = format!("{losses:?}");
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite_step{}.json", losses.step));
            let dump = Dump { step: losses.step, losses, batch: plan };
            match serde_json::to_vec_pretty(&dump).map(|j| std::fs::write(&path, j)) {
                Ok(Ok(())) => detail.push_str(&format!("; batch dumped to {}", path.display())),
                _ => warn!("could not write non-finite dump to {}", path.display()),
            }
        }
        MipaeError::NonFinite { step: losses.step, detail }
    }

    /// Snapshot of the current state as a checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            networks: self.networks.clone(),
            phase1_steps: self.step,
            phase2_steps: 0,
            rng: self.rng.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Mean per-pixel error of `D(E_c(x), E_p(x))` over every frame of `data`, in
/// evaluation mode.
pub fn validation_recon<S: ClipSource>(nets: &Networks<f32>, data: &S) -> f64 {
    let size = nets.config.frame_size;
    let frames: Vec<&[u8]> = (0..data.num_clips()).flat_map(|c| (0..data.clip_len()).map(move |t| data.clip(c).frame_u8(t))).collect();
    let mut total = 0.0;
    for chunk in frames.chunks(64) {
        let x = frames_tensor::<f32>(chunk, size, nets.config.channels);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = nets.reconstruct(&mut tape, xv, Mode::EVAL);
        let err = recon_loss(&mut tape, y, xv).expect("same shape");
        total += tape.item(err) as f64 * chunk.len() as f64;
    }
    total / frames.len().max(1) as f64
}

/// Result of a phase-1 run.
#[derive(Debug)]
pub struct MainOutcome {
    /// Checkpoint with the lowest validation reconstruction error.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<StepLosses>,
}

fn csv_err(path: &Path, e: csv::Error) -> MipaeError {
    MipaeError::io(path, std::io::Error::other(e.to_string()))
}

/// Runs phase 1 for `cfg.steps_phase1` steps. With `out_dir`, writes
/// `train_log.csv`, `last.ckpt` on schedule and `best.ckpt` on improvement.
pub fn train_main<S: ClipSource>(train: &S, val: &S, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<MainOutcome> {
    let mut trainer = MainTrainer::new(cfg, train)?;
    trainer.dump_dir = out_dir.map(Path::to_path_buf);
    let mut writer = match out_dir {
        Some(dir) => {
            let path = dir.join("train_log.csv");
            let file = File::create(&path).map_err(|e| MipaeError::io(&path, e))?;
            Some((csv::Writer::from_writer(BufWriter::new(file)), path))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.steps_phase1);
    let mut best: Option<Checkpoint> = None;
    let steps = cfg.steps_phase1 as u64;
    for s in 1..=steps {
        let losses = trainer.step()?;
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(losses).map_err(|e| csv_err(path, e))?;
        }
        log.push(losses);
        let validate = s == steps || (cfg.validation_interval > 0 && s % cfg.validation_interval as u64 == 0);
        if validate && val.num_clips() > 0 {
            let v = validation_recon(&trainer.networks, val);
            trainer.stats.last_val_recon = Some(v);
            info!("step {s}: recon {:.5} sim {:.5} mi {:.4} critic {:.4} val {v:.5}", trainer.stats.recon, trainer.stats.sim, trainer.stats.mi, trainer.stats.critic);
            if trainer.stats.best_val_recon.is_none_or(|b| v < b) {
                trainer.stats.best_val_recon = Some(v);
                trainer.stats.best_step = s;
                let ck = trainer.checkpoint();
                if let Some(dir) = out_dir {
                    ck.save(dir.join("best.ckpt"))?;
                }
                best = Some(ck);
            }
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_interval > 0 && s % cfg.checkpoint_interval as u64 == 0) {
            trainer.checkpoint().save(dir.join("last.ckpt"))?;
        }
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| MipaeError::io(&path, e))?;
    }
    let last = trainer.checkpoint();
    if let Some(dir) = out_dir {
        last.save(dir.join("last.ckpt"))?;
    }
    let mut best = best.unwrap_or_else(|| last.clone());
    // the best snapshot carries the final bookkeeping so the log of the run is complete
    best.stats.last_val_recon = last.stats.last_val_recon;
    Ok(MainOutcome { best, last, log })
}
