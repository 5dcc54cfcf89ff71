//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns
//! the gradients of every leaf that requires one. Tapes are cheap and meant
//! to be rebuilt for each forward pass.

use crate::kernels;
use crate::{Param, Tensor};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MulConst(usize, Rc<Tensor>),
    AddConst(usize),
    Square(usize),
    LnEps(usize, f64),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sum(usize),
    Mean(usize),
    DivScalar(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Concat(usize, usize),
    Softmax(usize),
    Reshape(usize),
    Rows { x: usize, start: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Gauss { t: usize, s: usize, eps: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    buffers: Vec<(String, Tensor)>,
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    id: usize,
    tape: &'t Tape,
}

/// Batch statistics produced by a training-mode batch normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        Var { id: inner.nodes.len() - 1, tape: self }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is tracked, e.g. for sensitivity analysis.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a model parameter to this tape.
    ///
    /// Trainable bindings are registered by name so that [`Grads::param`]
    /// can find them; binding the same name twice returns the first binding.
    pub fn param(&self, param: &Param, trainable: bool) -> Var<'_> {
        if trainable {
            if let Some(&id) = self.inner.borrow().params.get(&param.name) {
                return Var { id, tape: self };
            }
        }
        let v = self.push(param.value.clone(), Op::Leaf, trainable);
        if trainable {
            self.inner.borrow_mut().params.insert(param.name.clone(), v.id);
        }
        v
    }

    /// Queues a new value for a non-trainable buffer (running statistics,
    /// power-iteration vectors). The owner decides whether to apply it.
    pub fn record_buffer(&self, name: &str, value: Tensor) {
        self.inner.borrow_mut().buffers.push((name.to_string(), value));
    }

    /// Buffer updates recorded so far, in recording order.
    pub fn buffer_updates(&self) -> Vec<(String, Tensor)> {
        self.inner.borrow().buffers.clone()
    }

    /// Gradients of the scalar `loss` with respect to every gradient-tracking leaf.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let root = &nodes[loss.id];
        assert_eq!(root.value.len(), 1, "backward() needs a scalar, got {:?}", root.value.shape());
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv));
                    }
                    if wants(*b) {
                        acc(*b, g.zip_map(val(*a), |gv, av| gv * av));
                    }
                }
                Op::AddScalar(a) | Op::AddConst(a) => acc(*a, g),
                Op::MulScalar(a, c) => acc(*a, g.map(|v| v * c)),
                Op::MulConst(a, k) => acc(*a, g.zip_map(k, |gv, kv| gv * kv)),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gv, av| 2.0 * av * gv)),
                Op::LnEps(a, eps) => acc(*a, g.zip_map(val(*a), |gv, av| gv / (av + eps))),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, av| if av > 0.0 { gv } else { 0.0 })),
                Op::LeakyRelu(a, s) => {
                    acc(*a, g.zip_map(val(*a), |gv, av| if av > 0.0 { gv } else { gv * s }))
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Tensor::full(val(*a).shape(), g.item() / n))
                }
                Op::DivScalar(a, s) => {
                    let sv = val(*s).item();
                    if wants(*a) {
                        acc(*a, g.map(|v| v / sv));
                    }
                    if wants(*s) {
                        let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                        acc(*s, Tensor::new(val(*s).shape(), vec![-dot / (sv * sv)]));
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw) =
                        kernels::conv2d_backward(val(*x), val(*w), &g, *stride, *pad, wants(*x), wants(*w));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            acc(*b, Tensor::new(val(*b).shape(), kernels::channel_sums(&g)));
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gxh = g.zip_map(xhat, |a, b| a * b);
                    let sum_g = kernels::channel_sums(&g);
                    let sum_gxh = kernels::channel_sums(&gxh);
                    if wants(*gamma) {
                        acc(*gamma, Tensor::new(val(*gamma).shape(), sum_gxh.clone()));
                    }
                    if wants(*beta) {
                        acc(*beta, Tensor::new(val(*beta).shape(), sum_g.clone()));
                    }
                    if wants(*x) {
                        let gam = val(*gamma).data();
                        let mut gx = vec![0.0; g.len()];
                        for b in 0..n {
                            for ci in 0..c {
                                let off = (b * c + ci) * hw;
                                let k = gam[ci] * inv_std[ci];
                                for j in off..off + hw {
                                    gx[j] = if *batch_stats {
                                        k / m * (m * g.data()[j] - sum_g[ci] - xhat.data()[j] * sum_gxh[ci])
                                    } else {
                                        k * g.data()[j]
                                    };
                                }
                            }
                        }
                        acc(*x, Tensor::new(g.shape(), gx));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    for (gv, &i) in g.data().iter().zip(argmax) {
                        gx.data_mut()[i] += gv;
                    }
                    acc(*x, gx);
                }
                Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(val(*x).shape(), &g)),
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = val(*a).dims4();
                    let cb = val(*b).shape()[1];
                    let hw = h * w;
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for bi in 0..n {
                        let off = bi * (ca + cb) * hw;
                        ga.extend_from_slice(&g.data()[off..off + ca * hw]);
                        gb.extend_from_slice(&g.data()[off + ca * hw..off + (ca + cb) * hw]);
                    }
                    acc(*a, Tensor::new(val(*a).shape(), ga));
                    acc(*b, Tensor::new(val(*b).shape(), gb));
                }
                Op::Softmax(x) => {
                    let (n, c, h, w) = g.dims4();
                    let hw = h * w;
                    let y = node.value.data();
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for p in 0..hw {
                            let idx = |ci: usize| (b * c + ci) * hw + p;
                            let dot: f64 = (0..c).map(|ci| g.data()[idx(ci)] * y[idx(ci)]).sum();
                            for ci in 0..c {
                                gx[idx(ci)] = y[idx(ci)] * (g.data()[idx(ci)] - dot);
                            }
                        }
                    }
                    acc(*x, Tensor::new(g.shape(), gx));
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())),
                Op::Rows { x, start } => {
                    let full = val(*x);
                    let stride = full.len() / full.shape()[0];
                    let mut gx = Tensor::zeros(full.shape());
                    gx.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                    acc(*x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (bsz, f) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let o = val(*w).shape()[0];
                    if wants(*x) {
                        let mut gx = vec![0.0; bsz * f];
                        kernels::gemm(bsz, o, f, g.data(), (o as isize, 1), val(*w).data(), (f as isize, 1), 0.0, &mut gx, (f as isize, 1));
                        acc(*x, Tensor::new(val(*x).shape(), gx));
                    }
                    if wants(*w) {
                        let mut gw = vec![0.0; o * f];
                        kernels::gemm(o, bsz, f, g.data(), (1, o as isize), val(*x).data(), (f as isize, 1), 0.0, &mut gw, (f as isize, 1));
                        acc(*w, Tensor::new(val(*w).shape(), gw));
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut gb = vec![0.0; o];
                            for row in g.data().chunks(o) {
                                for (acc_v, v) in gb.iter_mut().zip(row) {
                                    *acc_v += v;
                                }
                            }
                            acc(*b, Tensor::new(val(*b).shape(), gb));
                        }
                    }
                }
                Op::Gauss { t, s, eps } => {
                    let sv = val(*s).item();
                    let d = sv * sv + eps;
                    let y = &node.value;
                    if wants(*t) {
                        let gy = g.zip_map(y, |a, b| a * b);
                        acc(*t, gy.zip_map(val(*t), |a, tv| -2.0 * tv / d * a));
                    }
                    if wants(*s) {
                        let total: f64 = g
                            .data()
                            .iter()
                            .zip(y.data())
                            .zip(val(*t).data())
                            .map(|((gv, yv), tv)| gv * yv * tv * tv)
                            .sum();
                        acc(*s, Tensor::new(val(*s).shape(), vec![total * 2.0 * sv / (d * d)]));
                    }
                }
            }
        }
        Grads { grads, params: inner.params.clone() }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Grads {
    /// Gradient of a leaf variable, if it was reached.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a trainable parameter bound by name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.grads.get(id)).and_then(Option::as_ref)
    }

    /// Sum of squared entries over all parameter gradients.
    pub fn param_sq_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.params.values().copied().collect();
        ids.sort_unstable();
        ids.iter()
            .filter_map(|&id| self.grads.get(id).and_then(Option::as_ref))
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(&[self.id])
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.push_rc(self.value(), Op::Leaf, false)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|a| a + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|a| a * c);
        self.unary(v, Op::MulScalar(self.id, c))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, k: &Tensor) -> Var<'t> {
        let v = self.value().zip_map(k, |a, b| a * b);
        self.unary(v, Op::MulConst(self.id, Rc::new(k.clone())))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(self, k: &Tensor) -> Var<'t> {
        let v = self.value().zip_map(k, |a, b| a + b);
        self.unary(v, Op::AddConst(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|a| a * a);
        self.unary(v, Op::Square(self.id))
    }

    /// `ln(x + eps)`
    pub fn ln_eps(self, eps: f64) -> Var<'t> {
        let v = self.value().map(|a| (a + eps).ln());
        self.unary(v, Op::LnEps(self.id, eps))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|a| a.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|a| if a > 0.0 { a } else { a * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Division by a one-element variable.
    pub fn div_scalar(self, s: Var<'t>) -> Var<'t> {
        let sv = s.item();
        let v = self.value().map(|a| a / sv);
        self.binary(s, v, Op::DivScalar(self.id, s.id))
    }

    /// 2D cross-correlation of an NCHW input with an `[out, in, kh, kw]` kernel.
    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
        let bias = b.map(|b| b.value());
        let v = kernels::conv2d_forward(&self.value(), &w.value(), bias.as_deref(), stride, pad);
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.needs(&ids);
        self.tape.push(v, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad }, rg)
    }

    /// Batch normalisation using the statistics of this batch.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> (Var<'t>, BatchStats) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mean: Vec<f64> = kernels::channel_sums(&x).into_iter().map(|s| s / m).collect();
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * hw;
                var[ci] += x.data()[off..off + hw].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m;
        }
        let out = self.batch_norm_with(gamma, beta, &mean, &var, eps, true);
        (out, BatchStats { mean, var })
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], var: &[f64], eps: f64) -> Var<'t> {
        self.batch_norm_with(gamma, beta, mean, var, eps, false)
    }

    fn batch_norm_with(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * hw;
                for j in off..off + hw {
                    xhat[j] = (x.data()[j] - mean[ci]) * inv_std[ci];
                    y[j] = gv.data()[ci] * xhat[j] + bv.data()[ci];
                }
            }
        }
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        self.tape.push(
            Tensor::new(x.shape(), y),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Tensor::new(x.shape(), xhat),
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn maxpool2(self) -> Var<'t> {
        let (v, argmax) = kernels::maxpool2(&self.value());
        self.unary(v, Op::MaxPool2 { x: self.id, argmax })
    }

    /// 2× bilinear upsampling (half-pixel centres, edge replication).
    pub fn upsample2(self) -> Var<'t> {
        let v = kernels::upsample2_forward(&self.value());
        self.unary(v, Op::Upsample2(self.id))
    }

    /// Concatenation along the channel axis of two NCHW tensors.
    pub fn concat_channels(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: {:?} vs {:?}", a.shape(), b.shape());
        let hw = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for bi in 0..n {
            data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let v = Tensor::new(&[n, ca + cb, h, w], data);
        self.binary(other, v, Op::Concat(self.id, other.id))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut y = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ci: usize| (b * c + ci) * hw + p;
                let max = (0..c).map(|ci| x.data()[idx(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (x.data()[idx(ci)] - max).exp();
                    y[idx(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    y[idx(ci)] /= z;
                }
            }
        }
        self.unary(Tensor::new(x.shape(), y), Op::Softmax(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// Items `start..end` along the leading axis.
    pub fn rows(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let n = x.shape()[0];
        assert!(start < end && end <= n, "rows {start}..{end} out of range for {n}");
        let stride = x.len() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(&shape, x.data()[start * stride..end * stride].to_vec());
        self.unary(v, Op::Rows { x: self.id, start })
    }

    /// `x · wᵀ + b` for `x: [batch, in]`, `w: [out, in]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
        let (x, wv) = (self.value(), w.value());
        assert_eq!(x.shape().len(), 2, "linear expects [batch, features]");
        let (bsz, f) = (x.shape()[0], x.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), &[o, f], "linear weight shape");
        let mut y = vec![0.0; bsz * o];
        let beta = if let Some(b) = b {
            let bv = b.value();
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
            1.0
        } else {
            0.0
        };
        kernels::gemm(bsz, f, o, x.data(), (f as isize, 1), wv.data(), (1, f as isize), beta, &mut y, (o as isize, 1));
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.needs(&ids);
        self.tape.push(Tensor::new(&[bsz, o], y), Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) }, rg)
    }

    /// Gaussian bump `exp(-x² / (s² + eps))` with a one-element scale variable `s`.
    pub fn gauss(self, s: Var<'t>, eps: f64) -> Var<'t> {
        let sv = s.item();
        let d = sv * sv + eps;
        let v = self.value().map(|t| (-t * t / d).exp());
        self.binary(s, v, Op::Gauss { t: self.id, s: s.id, eps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks the tape gradient of `f` at `x0` against central differences.
    fn check_grad(x0: &Tensor, f: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>, tol: f64) {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = f(&tape, x);
        let grads = tape.backward(y);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let tape = Tape::new();
                let v = tape.constant(xp);
                f(&tape, v).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!((a - numeric).abs() / denom < tol, "entry {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = Tensor::uniform(&[2, 3], 0.2, 1.5, &mut rng());
        check_grad(&x0, |_, x| x.square().tanh().sum(), 1e-6);
        check_grad(&x0, |_, x| x.ln_eps(1e-12).mul(x).mean(), 1e-6);
        check_grad(&x0, |_, x| x.add_scalar(-0.8).leaky_relu(0.2).square().sum(), 1e-6);
        check_grad(&x0, |t, x| x.sub(t.constant(Tensor::full(&[2, 3], 0.5))).relu().sum(), 1e-6);
    }

    #[test]
    fn row_slices_route_gradients() {
        let x0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng());
        check_grad(&x0, |_, x| x.rows(1, 3).square().sum().add(x.rows(0, 1).tanh().sum()), 1e-6);
    }

    #[test]
    fn div_by_scalar_variable() {
        let x0 = Tensor::uniform(&[4], 0.5, 2.0, &mut rng());
        check_grad(&x0, |_, x| x.div_scalar(x.square().sum()).square().sum(), 1e-6);
    }

    #[test]
    fn conv2d_gradient_wrt_input_and_weight() {
        let mut r = rng();
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let x0 = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
        for &(s, p) in &[(1, 1), (2, 1), (1, 0)] {
            let w = w0.clone();
            check_grad(&x0, move |t, x| x.conv2d(t.constant(w.clone()), None, s, p).tanh().sum(), 1e-5);
            let x = x0.clone();
            check_grad(
                &w0,
                move |t, w| {
                    let b = t.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]));
                    t.constant(x.clone()).conv2d(w, Some(b), s, p).square().mean()
                },
                1e-5,
            );
        }
        let w1 = Tensor::randn(&[4, 2, 1, 1], 0.5, &mut r);
        check_grad(&x0, move |t, x| x.conv2d(t.constant(w1.clone()), None, 1, 0).square().sum(), 1e-5);
    }

    #[test]
    fn conv_bias_gradient_is_channel_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[2, 1, 1, 1], 1.0));
        let b = tape.var(Tensor::zeros(&[2]));
        let y = x.conv2d(w, Some(b), 1, 0).sum();
        let g = tape.backward(y);
        assert_eq!(g.wrt(b).unwrap().data(), &[18.0, 18.0]);
    }

    #[test]
    fn batch_norm_train_gradient() {
        let mut r = rng();
        let x0 = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        check_grad(
            &x0,
            move |t, x| {
                let g = t.constant(Tensor::new(&[2], vec![1.5, 0.7]));
                let b = t.constant(Tensor::new(&[2], vec![0.1, -0.3]));
                x.batch_norm_train(g, b, 1e-5).0.mul_const(&k).tanh().sum()
            },
            1e-5,
        );
        let xv = x0.clone();
        check_grad(
            &Tensor::new(&[2], vec![1.5, 0.7]),
            move |t, g| {
                let b = t.constant(Tensor::new(&[2], vec![0.1, -0.3]));
                t.constant(xv.clone()).batch_norm_train(g, b, 1e-5).0.tanh().sum()
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_eval_gradient() {
        let x0 = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng());
        check_grad(
            &x0,
            |t, x| {
                let g = t.constant(Tensor::new(&[2], vec![1.5, 0.7]));
                let b = t.constant(Tensor::new(&[2], vec![0.1, -0.3]));
                x.batch_norm_eval(g, b, &[0.2, -0.1], &[2.0, 0.5], 1e-5).tanh().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn batch_norm_train_normalises_each_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 5, 5], 3.0, &mut rng()).map(|v| v + 2.0));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = x.batch_norm_train(g, b, 0.0);
        let means: Vec<f64> = kernels::channel_sums(&y.value()).iter().map(|s| s / 100.0).collect();
        assert!(means.iter().all(|m| m.abs() < 1e-12));
        assert!(stats.var.iter().all(|v| *v > 1.0));
    }

    #[test]
    fn pooling_upsampling_concat_softmax_gradients() {
        let mut r = rng();
        let x0 = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
        let k = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r);
        check_grad(&x0, move |_, x| x.upsample2().mul_const(&k).sum(), 1e-6);
        let k2 = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut r);
        check_grad(&x0, move |_, x| x.maxpool2().mul_const(&k2).sum(), 1e-6);
        let k3 = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r);
        check_grad(&x0, move |_, x| x.concat_channels(x.square()).mul_const(&k3).sum(), 1e-6);
        let k4 = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
        check_grad(&x0, move |_, x| x.softmax_channels().ln_eps(0.0).mul_const(&k4).sum(), 1e-6);
    }

    #[test]
    fn linear_and_reshape_gradients() {
        let mut r = rng();
        let x0 = Tensor::randn(&[3, 1, 2, 2], 1.0, &mut r);
        let w0 = Tensor::randn(&[2, 4], 1.0, &mut r);
        let w = w0.clone();
        check_grad(
            &x0,
            move |t, x| {
                let b = t.constant(Tensor::new(&[2], vec![0.5, -0.5]));
                x.reshape(&[3, 4]).linear(t.constant(w.clone()), Some(b)).tanh().sum()
            },
            1e-6,
        );
        let x = x0.clone();
        check_grad(&w0, move |t, w| t.constant(x.clone()).reshape(&[3, 4]).linear(w, None).square().sum(), 1e-6);
    }

    #[test]
    fn gauss_gradients_in_input_and_scale() {
        let x0 = Tensor::randn(&[5], 0.5, &mut rng());
        check_grad(&x0, |t, x| x.gauss(t.constant(Tensor::scalar(0.7)), 1e-6).sum(), 1e-6);
        let t0 = Tensor::randn(&[6], 0.5, &mut rng());
        check_grad(&Tensor::scalar(0.6), move |t, s| t.constant(t0.clone()).gauss(s, 1e-6).sum(), 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let v = tape.var(Tensor::full(&[2], 2.0));
        let g = tape.backward(c.mul(v).sum());
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(v).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn param_binding_is_shared_by_name() {
        let p = Param::weight("w", Tensor::full(&[1], 2.0));
        let tape = Tape::new();
        let a = tape.param(&p, true);
        let b = tape.param(&p, true);
        let g = tape.backward(a.mul(b).sum());
        assert_eq!(g.param("w").unwrap().data(), &[4.0]);
        assert!(tape.param(&p, false).requires_grad() == false);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::full(&[3], 2.0));
        let y = x.mul(x.detach()).sum();
        let g = tape.backward(y);
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
