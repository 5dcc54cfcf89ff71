//! Batch assembly and seed-ordered sampling streams.

use crate::data::Sample;
use crate::error::{Error, Result};
use advtta_tensor::Tensor;
use rand::seq::SliceRandom;

/// Images of `samples` as `[N, 1, H, W]`.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot stack an empty pool".into()));
    }
    let hw = samples[0].image.hw();
    if samples.iter().any(|s| s.image.hw() != hw) {
        return Err(Error::Shape("pool mixes image sizes; preprocess to a common size first".into()));
    }
    Ok(Tensor::stack(&samples.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>()))
}

/// Labels of `samples` as `[N, C, H, W]`; every sample must be annotated.
pub fn stack_labels(samples: &[Sample]) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(l) = &s.label else {
            return Err(Error::Contract(format!("sample {:?} has no label", s.key())));
        };
        parts.push(l.to_tensor());
    }
    if parts.is_empty() {
        return Err(Error::Contract("cannot stack an empty pool".into()));
    }
    Ok(Tensor::stack(&parts))
}

/// Rows `idx` of a leading-axis batch.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::stack(&idx.iter().map(|&i| t.select(i)).collect::<Vec<_>>())
}

/// Endless sampling over `0..n`: a fresh permutation per pass, seeded by
/// `(seed, name, pass)`, so the order depends only on the seed.
#[derive(Clone, Debug)]
pub struct Stream {
    n: usize,
    seed: u64,
    name: &'static str,
    pass: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    pub fn new(n: usize, seed: u64, name: &'static str) -> Self {
        assert!(n > 0, "stream over an empty pool");
        let mut s = Stream { n, seed, name, pass: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut crate::seeded!(self.seed, "stream", self.name, self.pass));
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.pass += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Consecutive index chunks of at most `size` covering `0..n`.
pub fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
}
