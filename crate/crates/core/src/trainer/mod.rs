//! Both training phases, checkpoints and frame prediction.

mod checkpoint;
mod config;
mod phase1;
mod phase2;

pub use checkpoint::{Checkpoint, LossStats, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use phase1::{train_main, validation_recon, BatchPlan, MainOutcome, MainTrainer, StepLosses, StepPhase};
pub use phase2::{
    encode_latents, pose_source, predict, predict_clips, rollout, train_lstm, ClipLatents, LstmLosses, LstmOutcome,
    PoseSource,
};
