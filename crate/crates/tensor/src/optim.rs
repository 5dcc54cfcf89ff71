//! Adam.

use crate::{Grads, Param, Tensor};
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every weight that has a gradient in `grads`.
    /// Buffers and parameters absent from `grads` are left untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            if !p.is_weight() {
                continue;
            }
            let Some(g) = grads.param(&p.name) else { continue };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::weight("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let tape = Tape::new();
        let w = tape.param(&p, true);
        let g = tape.backward(w.square().sum());
        let mut opt = Adam::new(0.1);
        opt.step([&mut p], &g);
        let d = p.value.data();
        assert!((d[0] - 0.9).abs() < 1e-9 && (d[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Param::weight("w", Tensor::new(&[3], vec![2.0, -3.0, 0.5]));
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let tape = Tape::new();
            let w = tape.param(&p, true);
            let g = tape.backward(w.add_scalar(-1.0).square().sum());
            opt.step([&mut p], &g);
        }
        assert!(p.value.data().iter().all(|v| (v - 1.0).abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut p = Param::buffer("b", Tensor::full(&[1], 1.0));
        let tape = Tape::new();
        let w = tape.param(&p, true);
        let g = tape.backward(w.sum());
        Adam::new(0.1).step([&mut p], &g);
        assert_eq!(p.value.data(), &[1.0]);
    }
}
