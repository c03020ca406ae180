use mipae_tensor::gradcheck::directional;
use mipae_tensor::{BatchNorm, Init, Linear, LstmCell, Mode, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn assert_close(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    for seed in 0..3 {
        let c = directional(inputs, &f, 1e-6, seed);
        assert!(c.rel_error() < 1e-6, "{name}: {c:?} rel {}", c.rel_error());
    }
}

/// Scalar read-out `sum(y * r)` with a fixed random `r`.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let r = t.constant(rnd(t.shape(y), seed));
    let p = t.mul(y, r);
    t.sum(p)
}

#[test]
fn elementwise_ops() {
    let a = rnd(&[3, 4], 1);
    let b = rnd(&[3, 4], 2);
    assert_close("add/sub/mul", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul(d, v[1]);
        project(t, m, 9)
    });
    assert_close("activations", &[a.clone()], |t, v| {
        let x = t.scale(v[0], 0.7);
        let x = t.add_scalar(x, 0.1);
        let r = t.leaky_relu(x, 0.2);
        let s = t.sigmoid(r);
        let h = t.tanh(x);
        let e = t.exp(h);
        let sp = t.softplus(x);
        let q = t.square(sp);
        let y = t.add(s, e);
        let y = t.add(y, q);
        project(t, y, 3)
    });
    assert_close("relu/clamp", &[a.map(|x| x + 0.05)], |t, v| {
        let r = t.relu(v[0]);
        let c = t.clamp_max(v[0], 0.3);
        let y = t.add(r, c);
        project(t, y, 4)
    });
}

#[test]
fn reductions_and_shapes() {
    let a = rnd(&[4, 3, 2], 5);
    let b = rnd(&[4, 2, 2], 6);
    assert_close("concat/slice/select", &[a, b], |t, v| {
        let c = t.concat1(&[v[0], v[1]]);
        let s = t.slice1(c, 1, 3);
        let g = t.select_rows(s, &[3, 0, 0, 2]);
        let r = t.reshape(g, &[4, 6]);
        let rows = t.sum_rows(r);
        let sq = t.square(rows);
        let m = t.mean(sq);
        let s2 = t.sum(g);
        let y = t.add(m, s2);
        y
    });
}

#[test]
fn linear_layer() {
    let x = rnd(&[5, 3], 7);
    let w = rnd(&[4, 3], 8);
    let b = rnd(&[4], 9);
    assert_close("linear", &[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]));
        project(t, y, 10)
    });
}

#[test]
fn convolutions() {
    let x = rnd(&[2, 3, 8, 8], 11);
    let w = rnd(&[4, 3, 4, 4], 12);
    let b = rnd(&[4], 13);
    assert_close("conv2d", &[x.clone(), w, b.clone()], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        project(t, y, 14)
    });
    let wt = rnd(&[3, 4, 4, 4], 15);
    assert_close("conv_transpose2d", &[x, wt, b], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1);
        assert_eq!(t.shape(y), &[2, 4, 16, 16]);
        project(t, y, 16)
    });
    let x1 = rnd(&[2, 5, 1, 1], 17);
    let w1 = rnd(&[5, 3, 4, 4], 18);
    assert_close("conv_transpose2d valid", &[x1, w1], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], None, 1, 0);
        assert_eq!(t.shape(y), &[2, 3, 4, 4]);
        project(t, y, 19)
    });
}

#[test]
fn batch_norm_both_modes() {
    let x = rnd(&[4, 3, 2, 2], 20);
    let g = rnd(&[3], 21);
    let b = rnd(&[3], 22);
    assert_close("bn batch", &[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5);
        project(t, y, 23)
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    assert_close("bn running", &[x, g, b], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5);
        project(t, y, 24)
    });
}

#[test]
fn layer_modules_and_stat_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new("m");
    let lin = Linear::new(&mut store, "fc", 3, 8, Init::FanIn, &mut rng);
    let bn = BatchNorm::new(&mut store, "bn", 8, &mut rng);
    let cell = LstmCell::new(&mut store, "lstm", 8, 6, &mut rng);
    let x = rnd(&[5, 3], 30);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let h = lin.forward(&mut tape, &store, xv, Mode::TRAIN);
    let h = bn.forward(&mut tape, &store, h, Mode::TRAIN);
    let s0 = cell.zero_state(&mut tape, 5);
    let s1 = cell.forward(&mut tape, &store, h, s0, Mode::TRAIN);
    let s2 = cell.forward(&mut tape, &store, h, s1, Mode::TRAIN);
    let loss = project(&mut tape, s2.h, 31);
    let grads = tape.backward(loss);
    let pg = grads.for_store(&store);
    assert_eq!(pg.len(), store.ids().filter(|&id| store.is_trainable(id)).count());
    assert!(pg.iter().all(|(_, g)| g.all_finite()));

    // Constants produce no parameter gradients at all.
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let h = lin.forward(&mut tape, &store, xv, Mode::EVAL);
    let loss = project(&mut tape, h, 32);
    assert!(!tape.needs_grad(loss));
    assert!(tape.backward(loss).for_store(&store).is_empty());

    let before = store.fingerprint();
    let mut tape = Tape::new();
    let xv = tape.constant(rnd(&[5, 8], 33));
    bn.forward(&mut tape, &store, xv, Mode::TRAIN);
    store.apply_stat_updates(&tape.take_stat_updates());
    assert_ne!(before, store.fingerprint());
}

#[test]
fn parameter_directional_derivative_through_store() {
    // Perturbing the store along a direction must match <grad, direction>.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new("m");
    let lin = Linear::new(&mut store, "fc", 4, 3, Init::FanIn, &mut rng);
    let x = rnd(&[6, 4], 40);
    let loss_of = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, store, xv, Mode::TRAIN);
        let y = tape.tanh(y);
        let l = project(&mut tape, y, 41);
        let g: Vec<Tensor<f64>> = tape.backward(l).for_store(store).into_iter().map(|(_, g)| g.clone()).collect();
        (tape.item(l), g)
    };
    let (_, grads) = loss_of(&store);
    let dir: Vec<Tensor<f64>> = grads.iter().map(|g| rnd(g.shape(), 42)).collect();
    let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
    let eps = 1e-6;
    let mut plus = store.clone();
    plus.axpy(eps, &dir);
    let mut minus = store.clone();
    minus.axpy(-eps, &dir);
    let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * eps);
    assert!((analytic - numeric).abs() / analytic.abs().max(1e-9) < 1e-6);
}
