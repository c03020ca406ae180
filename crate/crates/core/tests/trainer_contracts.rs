use mipae_core::nets::NetConfig;
use mipae_core::synthvid::{ClipSource, Dataset, DatasetConfig, Motion};
use mipae_core::trainer::{
    pose_source, predict, rollout, train_lstm, train_main, validation_recon, Checkpoint, MainTrainer, PoseSource,
    StepPhase, TrainConfig,
};
use mipae_core::MipaeError;
use mipae_tensor::{Mode, Tape, Tensor};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = DatasetConfig { num_sequences: 40, frame_size: 16, ..DatasetConfig::default() };
    cfg.net = NetConfig { base_channels: 4, frame_size: 16, content_dim: 12, pose_dim: 3, critic_hidden: 16, lstm_cells: 16, ..NetConfig::default() };
    cfg.batch_size = 6;
    cfg.lstm_batch_size = 8;
    cfg.validation_clips = 8;
    cfg.steps_phase1 = 30;
    cfg.steps_phase2 = 20;
    cfg.validation_interval = 10;
    cfg
}

fn data(cfg: &TrainConfig) -> (Dataset, Dataset) {
    Dataset::generate(&cfg.data).unwrap().split_tail(cfg.validation_clips)
}

#[test]
fn seeded_runs_repeat_exactly() {
    let cfg = tiny_config();
    let (train, _) = data(&cfg);
    let trace = || {
        let mut t = MainTrainer::new(&cfg, &train).unwrap();
        (0..100).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (trace(), trace());
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 1;
    let mut t = MainTrainer::new(&other, &train).unwrap();
    assert_ne!(t.step().unwrap(), a[0]);
}

#[test]
fn critic_and_main_updates_touch_disjoint_groups() {
    let cfg = tiny_config();
    let (train, _) = data(&cfg);
    let mut t = MainTrainer::new(&cfg, &train).unwrap();
    for _ in 0..3 {
        let mut seen = Vec::new();
        t.step_observed(|phase, nets| seen.push((phase, nets.stores().map(|s| s.fingerprint())))).unwrap();
        let [(p0, start), (p1, after_critic), (p2, after_main)] = seen.try_into().unwrap();
        assert_eq!((p0, p1, p2), (StepPhase::Start, StepPhase::AfterCritic, StepPhase::AfterMain));
        // order: content, pose, decoder, critic, predictor
        assert_eq!(start[..3], after_critic[..3]);
        assert_ne!(start[3], after_critic[3]);
        assert_ne!(after_critic[..3], after_main[..3]);
        assert_eq!(after_critic[3], after_main[3]);
        assert_eq!(start[4], after_main[4]);
    }
}

#[test]
fn training_writes_logs_and_checkpoints_that_round_trip() {
    let cfg = tiny_config();
    let (train, val) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train_main(&train, &val, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 30);
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,L_recon,L_sim,L_MI,L_C");
    assert_eq!(log.lines().count(), 31);

    let best = Checkpoint::load(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.fingerprint(), out.best.fingerprint());
    assert_eq!(best.stats.best_val_recon, out.best.stats.best_val_recon);
    let probe = validation_recon(&best.networks, &val);
    assert_eq!(probe.to_bits(), validation_recon(&out.best.networks, &val).to_bits());
    assert_eq!(Some(probe), best.stats.best_val_recon);
    let last = Checkpoint::load(dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.phase1_steps, 30);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let cfg = tiny_config();
    let (train, _) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut t = MainTrainer::new(&cfg, &train).unwrap();
    t.dump_dir = Some(dir.path().to_path_buf());
    let store = &mut t.networks.content.store;
    let id = store.ids().next().unwrap();
    store.get_mut(id).data_mut().fill(f32::NAN);
    match t.step() {
        Err(MipaeError::NonFinite { step: 1, detail }) => assert!(detail.contains("nonfinite_step1.json"), "{detail}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert!(dir.path().join("nonfinite_step1.json").exists());
}

#[test]
fn rollout_switches_to_predictions_after_context() {
    assert_eq!(pose_source(1, 5), PoseSource::Encoder);
    assert_eq!(pose_source(5, 5), PoseSource::Encoder);
    assert_eq!(pose_source(6, 5), PoseSource::Prediction);

    let cfg = tiny_config();
    let nets = mipae_core::nets::Networks::<f32>::new(&cfg.net, 1).unwrap();
    let mut tape = Tape::new();
    let zc = tape.constant(Tensor::zeros(&[2, cfg.net.content_dim]));
    let poses: Vec<_> = (0..5).map(|t| tape.constant(Tensor::full(&[2, cfg.net.pose_dim], t as f32 * 0.1))).collect();
    let (preds, sources) = rollout(&mut tape, &nets.predictor, zc, &poses, 5, 15, Mode::EVAL);
    assert_eq!(preds.len(), 14);
    let expected: Vec<_> = (1..15).map(|t| if t <= 5 { PoseSource::Encoder } else { PoseSource::Prediction }).collect();
    assert_eq!(sources, expected);
}

#[test]
fn lstm_phase_freezes_everything_else_and_predicts() {
    let cfg = tiny_config();
    let (train, val) = data(&cfg);
    let main = train_main(&train, &val, &cfg, None).unwrap();
    let before = main.best.fingerprint();
    let out = train_lstm(&train, main.best, None).unwrap();
    let after = out.checkpoint.fingerprint();
    assert_eq!(before[..4], after[..4]);
    assert_ne!(before[4], after[4]);
    assert_eq!(out.checkpoint.phase2_steps, 20);
    assert!(out.log.iter().all(|l| l.loss.is_finite()));

    let clip = val.clip(0);
    let context: Vec<&[u8]> = (0..5).map(|t| clip.frame_u8(t)).collect();
    let frames = predict(&out.checkpoint, &context, 10).unwrap();
    assert_eq!(frames.len(), 10);
    assert!(frames.iter().all(|f| f.len() == 16 * 16 && f.iter().all(|v| (0.0..=1.0).contains(v))));
    assert_eq!(predict(&out.checkpoint, &context, 10).unwrap(), frames);
    assert!(predict(&out.checkpoint, &context[..4], 10).is_err());
}

#[test]
fn lstm_rejects_mismatched_data() {
    let cfg = tiny_config();
    let (train, _) = data(&cfg);
    let nets = mipae_core::nets::Networks::new(&cfg.net, 0).unwrap();
    let ck = Checkpoint::new(cfg.clone(), nets, rand::SeedableRng::seed_from_u64(0));
    let other = Dataset::generate(&DatasetConfig { num_sequences: 4, frame_size: 16, motion: Motion::Static, context: 3, ..DatasetConfig::default() }).unwrap();
    assert!(matches!(train_lstm(&other, ck.clone(), None), Err(MipaeError::Checkpoint(_))));
    assert!(train_lstm(&train, ck, None).is_ok());
}
