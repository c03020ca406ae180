use mipae_core::nets::{NetConfig, Networks};
use mipae_tensor::gradcheck::directional;
use mipae_tensor::{Mode, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> NetConfig {
    NetConfig { content_dim: 8, pose_dim: 2, base_channels: 3, frame_size: 16, critic_hidden: 6, lstm_cells: 5, ..Default::default() }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn frames(seed: u64) -> Tensor<f64> {
    rnd(&[3, 1, 16, 16], seed).map(|v| v.abs().min(1.0))
}

fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let r = t.constant(rnd(t.shape(y), seed));
    let p = t.mul(y, r);
    t.sum(p)
}

/// Relative error between the analytic and finite-difference derivative of
/// `loss` along a random direction in the trainable parameters of `comp`.
fn param_check<C: Clone>(
    comp: &C,
    store: impl Fn(&mut C) -> &mut ParamStore<f64>,
    loss: impl Fn(&C, &mut Tape<f64>) -> Var,
) -> f64 {
    let eval = |c: &mut C| {
        let mut tape = Tape::new();
        let l = loss(c, &mut tape);
        let grads: Vec<Tensor<f64>> = tape.backward(l).for_store(store(c)).into_iter().map(|(_, g)| g.clone()).collect();
        (tape.item(l), grads)
    };
    let (_, grads) = eval(&mut comp.clone());
    let dir: Vec<Tensor<f64>> = grads.iter().enumerate().map(|(i, g)| rnd(g.shape(), 100 + i as u64)).collect();
    let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
    let eps = 1e-6;
    let mut plus = comp.clone();
    store(&mut plus).axpy(eps, &dir);
    let mut minus = comp.clone();
    store(&mut minus).axpy(-eps, &dir);
    let numeric = (eval(&mut plus).0 - eval(&mut minus).0) / (2.0 * eps);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-9)
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let nets = Networks::<f64>::new(&cfg(), 11).unwrap();
    let x = frames(1);
    for enc in [&nets.content, &nets.pose] {
        let err = param_check(enc, |e| &mut e.store, |e, tape| {
            let xv = tape.constant(x.clone());
            let z = e.encode(tape, xv, Mode::TRAIN);
            project(tape, z, 2)
        });
        assert!(err < 1e-3, "{} rel error {err}", enc.store.name());
        let c = directional(&[x.clone()], |tape, v| {
            let z = enc.encode(tape, v[0], Mode::TRAIN);
            project(tape, z, 3)
        }, 1e-6, 0);
        assert!(c.rel_error() < 1e-3, "input grad {c:?}");
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    for skips in [false, true] {
        let c = NetConfig { use_skip_connections: skips, ..cfg() };
        let nets = Networks::<f64>::new(&c, 12).unwrap();
        let x = frames(4);
        let err = param_check(&nets.decoder, |d| &mut d.store, |d, tape| {
            let xv = tape.constant(x.clone());
            let enc = nets.content.forward(tape, xv, Mode::TRAIN);
            let zp = nets.pose.encode(tape, xv, Mode::TRAIN);
            let y = d.forward(tape, enc.code, zp, Some(&enc.features), Mode::TRAIN);
            project(tape, y, 5)
        });
        assert!(err < 1e-3, "skips={skips} rel error {err}");
    }
}

#[test]
fn critic_and_predictor_gradients_match_finite_differences() {
    let c = cfg();
    let mut nets = Networks::<f64>::new(&c, 13).unwrap();
    // move the zero-initialised output layer off zero so the check is not trivial
    let dir: Vec<Tensor<f64>> = nets.critic.store.ids().enumerate().map(|(i, id)| rnd(nets.critic.store.get(id).shape(), 200 + i as u64)).collect();
    nets.critic.store.axpy(0.1, &dir);
    let a = rnd(&[4, c.pose_dim], 6);
    let b = rnd(&[4, c.pose_dim], 7);
    let err = param_check(&nets.critic, |k| &mut k.store, |k, tape| {
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let y = k.forward(tape, av, bv, Mode::TRAIN);
        project(tape, y, 8)
    });
    assert!(err < 1e-3, "critic rel error {err}");

    let zc = rnd(&[2, c.content_dim], 9);
    let poses: Vec<Tensor<f64>> = (0..4).map(|t| rnd(&[2, c.pose_dim], 20 + t)).collect();
    let err = param_check(&nets.predictor, |p| &mut p.store, |p, tape| {
        let z = tape.constant(zc.clone());
        let mut state = p.zero_state(tape, 2);
        let mut acc = None;
        for pose in &poses {
            let pv = tape.constant(pose.clone());
            let (out, next) = p.step(tape, z, pv, &state, Mode::TRAIN);
            state = next;
            let l = project(tape, out, 30);
            acc = Some(match acc {
                None => l,
                Some(prev) => tape.add(prev, l),
            });
        }
        acc.unwrap()
    });
    assert!(err < 1e-3, "predictor rel error {err}");
}
