//! Parameterized layers. Each layer only holds ids into a [`ParamStore`].

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{StatUpdate, Tape, Var};
use crate::tensor::Tensor;

/// How a forward pass treats parameters and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics in batch-norm (and running-stat updates).
    pub train: bool,
    /// Parameters are bound as trainable leaves.
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode { train: true, grad: true };
    pub const EVAL: Mode = Mode { train: false, grad: false };
    /// Running statistics, but gradients still flow to parameters.
    pub const EVAL_GRAD: Mode = Mode { train: false, grad: true };
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    Zeros,
}

impl Init {
    fn make<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::FanIn => Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.make(&[out_dim, in_dim], in_dim, rng), true);
        let bias = match init {
            Init::Zeros => Tensor::zeros(&[out_dim]),
            _ => Init::FanIn.make(&[out_dim], in_dim, rng),
        };
        let b = Some(store.add(format!("{name}.bias"), bias, true));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let w = tape.bind(store, self.w, mode.grad);
        let b = self.b.map(|b| tape.bind(store, b, mode.grad));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[out_ch, in_ch, kernel, kernel], 0.02, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let w = tape.bind(store, self.w, mode.grad);
        let b = self.b.map(|b| tape.bind(store, b, mode.grad));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    w: ParamId,
    b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[in_ch, out_ch, kernel, kernel], 0.02, rng), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let w = tape.bind(store, self.w, mode.grad);
        let b = self.b.map(|b| tape.bind(store, b, mode.grad));
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over axis 1 with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let gamma = Tensor::<T>::randn(&[channels], 0.02, rng).map(|g| g + T::one());
        Self {
            gamma: store.add(format!("{name}.gamma"), gamma, true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let gamma = tape.bind(store, self.gamma, mode.grad);
        let beta = tape.bind(store, self.beta, mode.grad);
        if mode.train {
            let (y, observed) = tape.batch_norm(x, gamma, beta, None, self.eps);
            let (batch_mean, batch_var) = observed.expect("batch statistics");
            tape.record_stats(StatUpdate {
                store: store.tag(),
                mean: self.mean,
                var: self.var,
                batch_mean,
                batch_var,
                momentum: self.momentum,
            });
            y
        } else {
            let stats = (store.get(self.mean).data(), store.get(self.var).data());
            tape.batch_norm(x, gamma, beta, Some(stats), self.eps).0
        }
    }
}

/// Recurrent state of one LSTM layer: `(h, c)`, each `[B, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Single LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    input: Linear,
    hidden_proj: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let input = Linear::new(store, &format!("{name}.ih"), in_dim, 4 * hidden, Init::FanIn, rng);
        let hidden_proj = store.add(format!("{name}.hh.weight"), Tensor::uniform(&[4 * hidden, hidden], bound, rng), true);
        Self { input, hidden_proj, hidden }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: LstmState,
        mode: Mode,
    ) -> LstmState {
        let hh = tape.bind(store, self.hidden_proj, mode.grad);
        let from_x = self.input.forward(tape, store, x, mode);
        let from_h = tape.linear(state.h, hh, None);
        let gates = tape.add(from_x, from_h);
        let n = self.hidden;
        let i = tape.slice1(gates, 0, n);
        let f = tape.slice1(gates, n, n);
        let g = tape.slice1(gates, 2 * n, n);
        let o = tape.slice1(gates, 3 * n, n);
        let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
        let g = tape.tanh(g);
        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }
}
