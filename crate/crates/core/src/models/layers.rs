//! Shared layer plumbing over a [`ParamStore`].

use super::{ParamStore, Pass};
use advtta_tensor::{Param, Tape, Tensor, Var};
use rand::Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Adds `{name}.w` (`[cout, cin, k, k]`, normal with `std`) and optionally a zero `{name}.b`.
pub(crate) fn add_conv<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    std: f64,
    rng: &mut R,
) {
    store.push(Param::weight(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng)));
    if bias {
        store.push(Param::weight(format!("{name}.b"), Tensor::zeros(&[cout])));
    }
}

/// He-normal standard deviation for a `k × k` kernel over `cin` channels.
pub(crate) fn he_std(cin: usize, k: usize) -> f64 {
    (2.0 / (cin * k * k) as f64).sqrt()
}

pub(crate) fn conv<'t>(store: &ParamStore, tape: &'t Tape, x: Var<'t>, name: &str, stride: usize, pad: usize, learn: bool) -> Var<'t> {
    let w = store.bind(tape, &format!("{name}.w"), learn);
    let bname = format!("{name}.b");
    let b = store.contains(&bname).then(|| store.bind(tape, &bname, learn));
    x.conv2d(w, b, stride, pad)
}

pub(crate) fn add_batch_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.push(Param::weight(format!("{name}.gamma"), Tensor::full(&[c], 1.0)));
    store.push(Param::weight(format!("{name}.beta"), Tensor::zeros(&[c])));
    store.push(Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])));
    store.push(Param::buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)));
}

/// Batch normalisation; in training passes the running-statistics update is
/// queued on the tape (unbiased variance, momentum 0.1).
pub(crate) fn batch_norm<'t>(store: &ParamStore, tape: &'t Tape, x: Var<'t>, name: &str, pass: Pass) -> Var<'t> {
    let gamma = store.bind(tape, &format!("{name}.gamma"), pass.learn);
    let beta = store.bind(tape, &format!("{name}.beta"), pass.learn);
    let (mk, vk) = (format!("{name}.running_mean"), format!("{name}.running_var"));
    if pass.train {
        let (y, stats) = x.batch_norm_train(gamma, beta, BN_EPS);
        let shape = x.shape();
        let m = (shape[0] * shape[2] * shape[3]) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let rm = store.get(&mk).value.data();
        let rv = store.get(&vk).value.data();
        let c = stats.mean.len();
        let new_m: Vec<f64> = (0..c).map(|i| (1.0 - BN_MOMENTUM) * rm[i] + BN_MOMENTUM * stats.mean[i]).collect();
        let new_v: Vec<f64> = (0..c).map(|i| (1.0 - BN_MOMENTUM) * rv[i] + BN_MOMENTUM * stats.var[i] * unbias).collect();
        tape.record_buffer(&mk, Tensor::new(&[c], new_m));
        tape.record_buffer(&vk, Tensor::new(&[c], new_v));
        y
    } else {
        let rm = store.get(&mk).value.clone();
        let rv = store.get(&vk).value.clone();
        x.batch_norm_eval(gamma, beta, rm.data(), rv.data(), BN_EPS)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= n;
    }
}

/// `W v` for `W` viewed as `[rows, len / rows]`.
fn matvec(w: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = w.len() / rows;
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ u` for `W` viewed as `[u.len(), len / u.len()]`.
fn matvec_t(w: &[f64], u: &[f64]) -> Vec<f64> {
    let rows = u.len();
    let cols = w.len() / rows;
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * u[r];
        }
    }
    out
}

/// One power-iteration step: returns `(u', v)` with `v = n(Wᵀu)`, `u' = n(Wv)`.
pub(crate) fn power_step(w: &Tensor, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rows = w.shape()[0];
    let mut v = matvec_t(w.data(), u);
    normalize(&mut v);
    let mut u2 = matvec(w.data(), rows, &v);
    normalize(&mut u2);
    (u2, v)
}

/// Registers the power-iteration vector `{name}.u` for weight `{name}.w`,
/// warmed up with `warmup` iterations from a random start.
pub(crate) fn add_spectral_u<R: Rng>(store: &mut ParamStore, name: &str, warmup: usize, rng: &mut R) {
    let w = store.get(&format!("{name}.w")).value.clone();
    let rows = w.shape()[0];
    let mut u = Tensor::randn(&[rows], 1.0, rng).into_data();
    normalize(&mut u);
    for _ in 0..warmup {
        u = power_step(&w, &u).0;
    }
    store.push(Param::buffer(format!("{name}.u"), Tensor::new(&[rows], u)));
}

/// `W / σ̂(W)` with `σ̂ = uᵀ W v`; gradients flow through σ̂ with `u`, `v`
/// held fixed. Training passes advance `u` by one power-iteration step.
pub(crate) fn spectral_weight<'t>(store: &ParamStore, tape: &'t Tape, name: &str, pass: Pass) -> Var<'t> {
    let wname = format!("{name}.w");
    let uname = format!("{name}.u");
    let w = store.bind(tape, &wname, pass.learn);
    let wv = store.get(&wname).value.clone();
    let u_old = store.get(&uname).value.data().to_vec();
    let (u, v) = if pass.train {
        let (u2, v) = power_step(&wv, &u_old);
        tape.record_buffer(&uname, Tensor::new(&[u2.len()], u2.clone()));
        (u2, v)
    } else {
        let mut v = matvec_t(wv.data(), &u_old);
        normalize(&mut v);
        (u_old, v)
    };
    let cols = v.len();
    let mut outer = vec![0.0; u.len() * cols];
    for (r, ur) in u.iter().enumerate() {
        for (c, vc) in v.iter().enumerate() {
            outer[r * cols + c] = ur * vc;
        }
    }
    let sigma = w.mul_const(&Tensor::new(wv.shape(), outer)).sum();
    w.div_scalar(sigma)
}

/// The spectral-norm estimate `uᵀ W v` a frozen pass would divide by.
pub(crate) fn spectral_sigma(store: &ParamStore, name: &str) -> f64 {
    let w = &store.get(&format!("{name}.w")).value;
    let u = store.get(&format!("{name}.u")).value.data();
    let mut v = matvec_t(w.data(), u);
    normalize(&mut v);
    let wv = matvec(w.data(), u.len(), &v);
    wv.iter().zip(u).map(|(a, b)| a * b).sum()
}
