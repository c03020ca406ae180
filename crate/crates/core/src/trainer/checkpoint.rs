//! Versioned binary checkpoint container; layout in `docs/checkpoint_format.md`.

use std::path::Path;

use mipae_tensor::{NamedTensor, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{MipaeError, Result};
use crate::nets::Networks;
use crate::synthvid::io::{check_header, checked_payload, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MIPAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

/// Exponentially smoothed training losses and validation bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub recon: f64,
    pub sim: f64,
    pub mi: f64,
    pub critic: f64,
    pub lstm: f64,
    pub best_val_recon: Option<f64>,
    pub best_step: u64,
    pub last_val_recon: Option<f64>,
}

impl LossStats {
    const DECAY: f64 = 0.98;

    pub(crate) fn smooth(slot: &mut f64, value: f64, first: bool) {
        *slot = if first { value } else { Self::DECAY * *slot + (1.0 - Self::DECAY) * value };
    }
}

/// Parameters, configuration, counters and RNG state of a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub networks: Networks<f32>,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub rng: ChaCha8Rng,
    pub stats: LossStats,
}

fn corrupt(detail: impl Into<String>) -> MipaeError {
    MipaeError::Corrupt { what: WHAT, detail: detail.into() }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn get_bytes<'a>(r: &mut Reader<'a>, field: &str) -> Result<&'a [u8]> {
    let n = r.u32(field)? as usize;
    r.take(n, field)
}

fn get_str<'a>(r: &mut Reader<'a>, field: &str) -> Result<&'a str> {
    std::str::from_utf8(get_bytes(r, field)?).map_err(|_| corrupt(format!("{field} is not UTF-8")))
}

impl Checkpoint {
    pub fn new(config: TrainConfig, networks: Networks<f32>, rng: ChaCha8Rng) -> Self {
        Self { config, networks, phase1_steps: 0, phase2_steps: 0, rng, stats: LossStats::default() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.to_toml().as_bytes());
        out.extend_from_slice(&self.phase1_steps.to_le_bytes());
        out.extend_from_slice(&self.phase2_steps.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.rng).expect("rng state serializes"));
        put_bytes(&mut out, &serde_json::to_vec(&self.stats).expect("stats serialize"));
        let stores = self.networks.stores();
        out.extend_from_slice(&(stores.len() as u32).to_le_bytes());
        for store in stores {
            put_bytes(&mut out, store.name().as_bytes());
            let tensors = store.export();
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in &tensors {
                put_bytes(&mut out, t.name.as_bytes());
                out.push(t.trainable as u8);
                out.extend_from_slice(&(t.value.ndim() as u32).to_le_bytes());
                for &d in t.value.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        // version first so an old file is reported as such rather than as damaged
        check_header(&mut Reader::new(bytes, WHAT), CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let body = checked_payload(bytes, WHAT)?;
        let mut r = Reader::new(body, WHAT);
        check_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = TrainConfig::from_toml(get_str(&mut r, "config")?)?;
        let phase1_steps = r.u64("phase 1 steps")?;
        let phase2_steps = r.u64("phase 2 steps")?;
        let rng: ChaCha8Rng =
            serde_json::from_slice(get_bytes(&mut r, "rng state")?).map_err(|e| corrupt(format!("rng state: {e}")))?;
        let stats: LossStats =
            serde_json::from_slice(get_bytes(&mut r, "loss stats")?).map_err(|e| corrupt(format!("loss stats: {e}")))?;

        let mut networks = Networks::<f32>::new(&config.net, 0)?;
        let groups = r.u32("group count")? as usize;
        if groups != networks.stores().len() {
            return Err(MipaeError::Checkpoint(format!("expected {} parameter groups, found {groups}", networks.stores().len())));
        }
        for store in networks.stores_mut() {
            let name = get_str(&mut r, "group name")?;
            if name != store.name() {
                return Err(MipaeError::Checkpoint(format!("expected group {}, found {name}", store.name())));
            }
            let count = r.u32("tensor count")? as usize;
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                let tname = get_str(&mut r, "tensor name")?.to_string();
                let trainable = r.take(1, "trainable flag")?[0] != 0;
                let ndim = r.u32("rank")? as usize;
                let shape = (0..ndim).map(|_| r.u64("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?, "tensor data")?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push(NamedTensor { name: tname, trainable, value: Tensor::from_vec(&shape, data)? });
            }
            store.import(&tensors).map_err(|e| MipaeError::Checkpoint(e.to_string()))?;
        }
        if r.position() != body.len() {
            return Err(corrupt(format!("{} trailing bytes", body.len() - r.position())));
        }
        Ok(Self { config, networks, phase1_steps, phase2_steps, rng, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| MipaeError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| MipaeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| MipaeError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Combined fingerprint of every parameter group.
    pub fn fingerprint(&self) -> [u64; 5] {
        self.networks.stores().map(|s| s.fingerprint())
    }
}
