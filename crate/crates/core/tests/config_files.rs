use std::path::Path;

use mipae_core::trainer::TrainConfig;

fn shipped(name: &str) -> TrainConfig {
    TrainConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn shipped_configs_parse_and_validate() {
    let desk = shipped("desk.toml");
    assert_eq!(desk.data.clip_len(), 15);
    assert_eq!(desk.loss.beta, 1e-4);
    let smoke = shipped("smoke.toml");
    assert_eq!(smoke.net.frame_size, 16);
}
