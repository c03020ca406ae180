//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are bound
//! from a [`ParamStore`] either as trainable leaves or as constants, so a loss
//! can use a network without ever producing gradients for it.

use std::collections::HashMap;
use std::sync::Arc;

use crate::exec;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics observed during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub store: u64,
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddChannel { x: Var, bias: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, out_ch: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize, in_ch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    ClampMax(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    Concat1(Vec<Var>),
    Slice1 { x: Var, start: usize, len: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: HashMap<(u64, usize, bool), Var>,
    params: Vec<(u64, ParamId, Var)>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leading dimension and the product of everything after axis 1.
fn split_channels(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [N, C, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bindings: HashMap::new(), params: Vec::new(), stat_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let g = self.needs_grad(x);
        self.push(value, op, g)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// A constant input (never receives gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient, e.g. for input-gradient checks.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. With `grad` false the value enters as a constant.
    pub fn bind(&mut self, store: &ParamStore<T>, id: ParamId, grad: bool) -> Var {
        let grad = grad && store.is_trainable(id);
        let key = (store.tag(), id.index(), grad);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let value = store.shared(id);
        self.nodes.push(Node { value, op: if grad { Op::Param } else { Op::Leaf }, needs_grad: grad });
        let v = Var(self.nodes.len() - 1);
        self.bindings.insert(key, v);
        if grad {
            self.params.push((store.tag(), id, v));
        }
        v
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add");
        let g = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub");
        let g = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul");
        let g = self.needs_grad(a) || self.needs_grad(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|a| a * s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|a| a + s);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.unary(x, v, Op::LeakyRelu(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.unary(x, v, Op::Exp(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.unary(x, v, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.unary(x, v, Op::Square(x))
    }

    /// `min(x, ceiling)`; gradient is zero where the ceiling is active.
    pub fn clamp_max(&mut self, x: Var, ceiling: f64) -> Var {
        let c = T::from_f64_lossy(ceiling);
        let v = self.value(x).map(|a| a.min(c));
        self.unary(x, v, Op::ClampMax(x, c))
    }

    // ---- reductions and reshaping -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.unary(x, v, Op::MeanAll(x))
    }

    /// Sums every row of a `[B, ...]` tensor, giving `[B]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.dim(0);
        let row = t.len() / b.max(1);
        let data = (0..b).map(|i| t.data()[i * row..(i + 1) * row].iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[b], data).unwrap();
        self.unary(x, v, Op::SumRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.nodes[x.0].value).clone().reshape(shape).expect("reshape");
        self.unary(x, v, Op::Reshape(x))
    }

    /// Concatenation along axis 1 of `[N, C_i, ...]` tensors sharing every other axis.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat1 of nothing");
        let first = self.shape(parts[0]).to_vec();
        let (n, _, s) = split_channels(&first);
        let mut channels = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert!(sh[0] == n && sh[2..] == first[2..], "concat1 shapes {first:?} vs {sh:?}");
            channels += sh[1];
        }
        let mut data = Vec::with_capacity(n * channels * s);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let row = t.dim(1) * s;
                data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let g = parts.iter().any(|&p| self.needs_grad(p));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat1(parts.to_vec()), g)
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let (n, c, s) = split_channels(t.shape());
        assert!(start + len <= c, "slice1 out of range");
        let mut data = Vec::with_capacity(n * len * s);
        for i in 0..n {
            data.extend_from_slice(&t.data()[(i * c + start) * s..(i * c + start + len) * s]);
        }
        let mut shape = t.shape().to_vec();
        shape[1] = len;
        let v = Tensor::from_vec(&shape, data).unwrap();
        self.unary(x, v, Op::Slice1 { x, start, len })
    }

    /// Gathers rows along axis 0 (indices may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select_rows(rows);
        self.unary(x, v, Op::SelectRows { x, rows: rows.to_vec() })
    }

    // ---- layers --------------------------------------------------------------

    /// Adds a per-channel bias `[C]` to a `[N, C, ...]` tensor.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let t = self.value(x);
        let (n, c, s) = split_channels(t.shape());
        let b = self.value(bias);
        assert_eq!(b.len(), c, "add_channel bias length");
        let mut out = (*self.nodes[x.0].value).clone();
        let bd = b.data().to_vec();
        for i in 0..n {
            for (ch, &bv) in bd.iter().enumerate() {
                out.data_mut()[(i * c + ch) * s..(i * c + ch + 1) * s].iter_mut().for_each(|a| *a = *a + bv);
            }
        }
        let g = self.needs_grad(x) || self.needs_grad(bias);
        self.push(out, Op::AddChannel { x, bias }, g)
    }

    /// `x[B, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} x {ws:?}");
        let (bsz, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = kernels::matmul(self.value(x).data(), false, self.value(w).data(), true, bsz, inp, out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            assert_eq!(bd.len(), out, "linear bias length");
            y.chunks_mut(out).for_each(|row| row.iter_mut().zip(bd).for_each(|(a, &c)| *a = *a + c));
        }
        let g = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        self.push(Tensor::from_vec(&[bsz, out], y).unwrap(), Op::Linear { x, w, b }, g)
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3], "conv2d shapes {xs:?} * {ws:?}");
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad).expect("conv2d kernel larger than input");
        let (batch, out_ch) = (xs[0], ws[0]);
        let rows = kernels::im2col_batch(&geom, batch, self.value(x).data());
        let pos = geom.positions();
        let yt = kernels::matmul(&rows, false, self.value(w).data(), true, batch * pos, geom.patch_len(), out_ch);
        let mut y = kernels::transpose_batch(&yt, batch, pos, out_ch);
        if let Some(b) = b {
            add_bias(&mut y, self.value(b).data(), pos);
        }
        let g = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        let v = Tensor::from_vec(&[batch, out_ch, geom.out_h, geom.out_w], y).unwrap();
        self.push(v, Op::Conv2d { x, w, b, geom, batch, out_ch }, g)
    }

    /// Transposed convolution of `x[N, Ci, H, W]` with `w[Ci, Co, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4 && ws[0] == xs[1] && ws[2] == ws[3], "conv_t shapes {xs:?} * {ws:?}");
        let (batch, in_ch, h, wd, out_ch, k) = (xs[0], xs[1], xs[2], xs[3], ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        // Geometry of the adjoint convolution mapping the output back onto x.
        let geom = ConvGeom::new(out_ch, oh, ow, k, stride, pad).expect("conv_t geometry");
        assert_eq!((geom.out_h, geom.out_w), (h, wd), "conv_t geometry does not invert");
        let xt = kernels::transpose_batch(self.value(x).data(), batch, in_ch, h * wd);
        let rows = kernels::matmul(&xt, false, self.value(w).data(), false, batch * h * wd, in_ch, geom.patch_len());
        let mut y = kernels::col2im_batch(&geom, batch, &rows);
        if let Some(b) = b {
            add_bias(&mut y, self.value(b).data(), oh * ow);
        }
        let g = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        let v = Tensor::from_vec(&[batch, out_ch, oh, ow], y).unwrap();
        self.push(v, Op::ConvT2d { x, w, b, geom, batch, in_ch }, g)
    }

    /// Per-channel normalization of `[N, C, ...]`. With `stats` the given running
    /// mean/variance are used; otherwise batch statistics are computed and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: f64,
    ) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let t = self.value(x);
        let (n, c, s) = split_channels(t.shape());
        let m = n * s;
        let eps = T::from_f64_lossy(eps);
        let (mean, var, batch_stats) = match stats {
            Some((mu, var)) => (mu.to_vec(), var.to_vec(), false),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        acc += t.data()[(i * c + ch) * s..(i * c + ch + 1) * s].iter().map(|a| a.as_f64()).sum::<f64>();
                    }
                    let mu = T::from_f64_lossy(acc) / mf;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &a in &t.data()[(i * c + ch) * s..(i * c + ch + 1) * s] {
                            sq = sq + (a - mu) * (a - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / mf;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = t.data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for (xh, yv) in xhat[r.clone()].iter_mut().zip(&mut y[r]) {
                    *xh = (*xh - mean[ch]) * inv_std[ch];
                    *yv = *xh * gd[ch] + bd[ch];
                }
            }
        }
        let shape = t.shape().to_vec();
        let g = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let out = self.push(
            Tensor::from_vec(&shape, y).unwrap(),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            g,
        );
        let observed = batch_stats.then(|| {
            let unbias = if m > 1 { T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap() } else { T::one() };
            (mean, var.into_iter().map(|v| v * unbias).collect())
        });
        (out, observed)
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs_grad(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| &*self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                acc(*a, gy.zip_map(val(*b), |g, x| g * x).unwrap());
                acc(*b, gy.zip_map(val(*a), |g, x| g * x).unwrap());
            }
            Op::Scale(x, s) => acc(*x, gy.map(|g| g * *s)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, gy.clone().reshape(val(*x).shape()).unwrap()),
            Op::Relu(x) => acc(*x, gy.zip_map(y, |g, o| if o > T::zero() { g } else { T::zero() }).unwrap()),
            Op::LeakyRelu(x, s) => {
                acc(*x, gy.zip_map(val(*x), |g, a| if a > T::zero() { g } else { g * *s }).unwrap())
            }
            Op::Tanh(x) => acc(*x, gy.zip_map(y, |g, o| g * (T::one() - o * o)).unwrap()),
            Op::Sigmoid(x) => acc(*x, gy.zip_map(y, |g, o| g * o * (T::one() - o)).unwrap()),
            Op::Exp(x) => acc(*x, gy.zip_map(y, |g, o| g * o).unwrap()),
            Op::Softplus(x) => acc(*x, gy.zip_map(val(*x), |g, a| g * sigmoid(a)).unwrap()),
            Op::Square(x) => {
                let two = T::from_f64_lossy(2.0);
                acc(*x, gy.zip_map(val(*x), |g, a| g * two * a).unwrap())
            }
            Op::ClampMax(x, c) => {
                acc(*x, gy.zip_map(val(*x), |g, a| if a < *c { g } else { T::zero() }).unwrap())
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), gy.item())),
            Op::MeanAll(x) => {
                let n = T::from_usize(val(*x).len().max(1)).unwrap();
                acc(*x, Tensor::full(val(*x).shape(), gy.item() / n))
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let row = xv.len() / xv.dim(0).max(1);
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat(g).take(row)).collect();
                acc(*x, Tensor::from_vec(xv.shape(), data).unwrap())
            }
            Op::Concat1(parts) => {
                let (n, c, s) = split_channels(y.shape());
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).dim(1);
                    let mut data = Vec::with_capacity(n * pc * s);
                    for i in 0..n {
                        data.extend_from_slice(&gy.data()[(i * c + offset) * s..(i * c + offset + pc) * s]);
                    }
                    acc(p, Tensor::from_vec(val(p).shape(), data).unwrap());
                    offset += pc;
                }
            }
            Op::Slice1 { x, start, len } => {
                let (n, c, s) = split_channels(val(*x).shape());
                let mut g = Tensor::zeros(val(*x).shape());
                for i in 0..n {
                    g.data_mut()[(i * c + start) * s..(i * c + start + len) * s]
                        .copy_from_slice(&gy.data()[i * len * s..(i + 1) * len * s]);
                }
                acc(*x, g)
            }
            Op::SelectRows { x, rows } => {
                let xv = val(*x);
                let row = xv.len() / xv.dim(0).max(1);
                let mut g = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut g.data_mut()[r * row..(r + 1) * row];
                    dst.iter_mut().zip(&gy.data()[k * row..(k + 1) * row]).for_each(|(a, &b)| *a = *a + b);
                }
                acc(*x, g)
            }
            Op::AddChannel { x, bias } => {
                acc(*x, gy.clone());
                if self.needs_grad(*bias) {
                    let (n, c, s) = split_channels(gy.shape());
                    acc(*bias, Tensor::from_vec(&[c], channel_sums(gy.data(), n, c, s)).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, inp) = (val(*x).dim(0), val(*x).dim(1));
                let out = val(*w).dim(0);
                if self.needs_grad(*x) {
                    let gx = kernels::matmul(gy.data(), false, val(*w).data(), false, bsz, out, inp);
                    acc(*x, Tensor::from_vec(&[bsz, inp], gx).unwrap());
                }
                if self.needs_grad(*w) {
                    let gw = kernels::matmul(gy.data(), true, val(*x).data(), false, out, bsz, inp);
                    acc(*w, Tensor::from_vec(&[out, inp], gw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        acc(*b, Tensor::from_vec(&[out], channel_sums(gy.data(), bsz, out, 1)).unwrap());
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, batch, out_ch } => {
                let pos = geom.positions();
                let gyt = kernels::transpose_batch(gy.data(), *batch, *out_ch, pos);
                if self.needs_grad(*w) {
                    let rows = kernels::im2col_batch(geom, *batch, val(*x).data());
                    let gw = kernels::matmul(&gyt, true, &rows, false, *out_ch, batch * pos, geom.patch_len());
                    acc(*w, Tensor::from_vec(val(*w).shape(), gw).unwrap());
                }
                if self.needs_grad(*x) {
                    let grows = kernels::matmul(&gyt, false, val(*w).data(), false, batch * pos, *out_ch, geom.patch_len());
                    let gx = kernels::col2im_batch(geom, *batch, &grows);
                    acc(*x, Tensor::from_vec(val(*x).shape(), gx).unwrap());
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        acc(*b, Tensor::from_vec(&[*out_ch], channel_sums(gy.data(), *batch, *out_ch, pos)).unwrap());
                    }
                }
            }
            Op::ConvT2d { x, w, b, geom, batch, in_ch } => {
                let hw = geom.positions();
                let grows = kernels::im2col_batch(geom, *batch, gy.data());
                if self.needs_grad(*x) {
                    let gxt = kernels::matmul(&grows, false, val(*w).data(), true, batch * hw, geom.patch_len(), *in_ch);
                    let gx = kernels::transpose_batch(&gxt, *batch, hw, *in_ch);
                    acc(*x, Tensor::from_vec(val(*x).shape(), gx).unwrap());
                }
                if self.needs_grad(*w) {
                    let xt = kernels::transpose_batch(val(*x).data(), *batch, *in_ch, hw);
                    let gw = kernels::matmul(&xt, true, &grows, false, *in_ch, batch * hw, geom.patch_len());
                    acc(*w, Tensor::from_vec(val(*w).shape(), gw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let s = geom.height * geom.width;
                        acc(*b, Tensor::from_vec(&[geom.channels], channel_sums(gy.data(), *batch, geom.channels, s)).unwrap());
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, s) = split_channels(gy.shape());
                let gd = val(*gamma).data();
                let dy = gy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                        for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                            sum_dy[ch] = sum_dy[ch] + g;
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + g * xh;
                        }
                    }
                }
                if self.needs_grad(*gamma) {
                    acc(*gamma, Tensor::from_vec(&[c], sum_dy_xhat.clone()).unwrap());
                }
                if self.needs_grad(*beta) {
                    acc(*beta, Tensor::from_vec(&[c], sum_dy.clone()).unwrap());
                }
                if self.needs_grad(*x) {
                    let mut gx = vec![T::zero(); dy.len()];
                    let m = T::from_usize(n * s).unwrap();
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                            let k = gd[ch] * inv_std[ch];
                            for ((o, &g), &xh) in gx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                                *o = if *batch_stats {
                                    k * (g - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m)
                                } else {
                                    k * g
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(gy.shape(), gx).unwrap());
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], spatial: usize) {
    let c = bias.len();
    exec::for_each_chunk_mut(y, c * spatial, |_, img| {
        for (ch, &b) in bias.iter().enumerate() {
            img[ch * spatial..(ch + 1) * spatial].iter_mut().for_each(|a| *a = *a + b);
        }
    });
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o = *o + g[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(a: T) -> T {
    a.max(T::zero()) + (-a.abs()).exp().ln_1p()
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of the trainable parameters of `store` bound on the tape, in store order.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(tag, _, _)| *tag == store.tag())
            .filter_map(|&(_, id, v)| self.wrt(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }
}
