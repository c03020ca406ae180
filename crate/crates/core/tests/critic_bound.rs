use mipae_core::nets::Networks;
use mipae_core::nets::NetConfig;
use mipae_core::objectives::{correlated_gaussian_pairs, critic_objective, critic_probe, mi_lower_bound, pair_logits, PairBatch, ProbeConfig, EXP_CEILING};
use mipae_tensor::{Mode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn independent_pairs_give_minus_one() {
    let cfg = ProbeConfig { steps: 1000, ..ProbeConfig::default() };
    let bound = critic_probe(5, &cfg, |rng, n| correlated_gaussian_pairs(rng, n, 5, 0.0));
    assert!((-1.1..=-0.9).contains(&bound), "bound {bound}");
}

#[test]
fn correlated_pairs_stay_below_analytic_mi() {
    for rho in [0.5f64, 0.9] {
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let cfg = ProbeConfig { steps: 1000, seed: 7, ..ProbeConfig::default() };
        let recovered = critic_probe(1, &cfg, |rng, n| correlated_gaussian_pairs(rng, n, 1, rho)) + 1.0;
        assert!(recovered > 0.0, "rho {rho}: {recovered}");
        assert!(recovered <= truth + 0.1, "rho {rho}: {recovered} vs {truth}");
    }
}

#[test]
fn gradients_are_isolated_between_critic_and_encoder() {
    let cfg = NetConfig { content_dim: 8, pose_dim: 2, base_channels: 3, frame_size: 16, critic_hidden: 6, lstm_cells: 5, ..Default::default() };
    let nets = Networks::<f64>::new(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = Tensor::<f64>::uniform(&[4, 1, 16, 16], 1.0, &mut rng).map(|v| v.abs());
    let pairs = PairBatch::new(vec![0, 1], vec![1, 2], &mut rng).unwrap();

    // critic step: pose codes detached, critic trainable
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let z = nets.pose.encode(&mut tape, x, Mode::TRAIN);
    let z = tape.detach(z);
    let a = tape.select_rows(z, &[0, 1]);
    let b = tape.select_rows(z, &[2, 3]);
    let logits = pair_logits(&mut tape, &nets.critic, a, b, &pairs, Mode::TRAIN);
    let obj = critic_objective(&mut tape, logits);
    let g = tape.backward(obj);
    assert!(g.for_store(&nets.pose.store).iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert!(!g.for_store(&nets.critic.store).is_empty());

    // main step: critic bound as constants, encoder trainable
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let z = nets.pose.encode(&mut tape, x, Mode::TRAIN);
    let a = tape.select_rows(z, &[0, 1]);
    let b = tape.select_rows(z, &[2, 3]);
    let logits = pair_logits(&mut tape, &nets.critic, a, b, &pairs, Mode { train: true, grad: false });
    let mi = mi_lower_bound(&mut tape, logits, EXP_CEILING);
    let g = tape.backward(mi);
    assert!(g.for_store(&nets.critic.store).is_empty());
    assert!(!g.for_store(&nets.pose.store).is_empty());
}
