//! Times phase-1 training steps for a few network widths and batch sizes.
//!
//! `cargo run --release -p mipae-core --example step_timing`

use std::time::Instant;

use mipae_core::synthvid::Dataset;
use mipae_core::trainer::{MainTrainer, TrainConfig};

fn main() -> mipae_core::Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.data.num_sequences = 200;
    cfg.validation_clips = 0;
    let data = Dataset::generate(&cfg.data)?;
    for (channels, batch) in [(16, 16), (16, 32), (32, 16), (32, 32), (64, 16)] {
        cfg.net.base_channels = channels;
        cfg.batch_size = batch;
        let mut trainer = MainTrainer::new(&cfg, &data)?;
        trainer.step()?;
        let n = 5;
        let start = Instant::now();
        for _ in 0..n {
            trainer.step()?;
        }
        println!("base_channels {channels:3} batch {batch:3}: {:.3} s/step", start.elapsed().as_secs_f64() / n as f64);
    }
    Ok(())
}
