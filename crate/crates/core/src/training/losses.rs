//! Supervised and least-squares adversarial objectives.

use crate::error::{Error, Result};
use advtta_tensor::{Tensor, Var};

/// Floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-class weights `w_i = 1 − n_i / n_tot` from the pixel counts of a hard
/// target batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

fn check_hard(target: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if target.shape().len() != 4 {
        return Err(Error::Contract(format!("target must be [N, C, H, W], got {:?}", target.shape())));
    }
    let dims = target.dims4();
    let (n, c, h, w) = dims;
    let hw = h * w;
    for b in 0..n {
        for p in 0..hw {
            let mut ones = 0;
            for k in 0..c {
                match target.data()[(b * c + k) * hw + p] {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    v => return Err(Error::Contract(format!("target is not hard: entry {v}"))),
                }
            }
            if ones != 1 {
                return Err(Error::Contract("target is not one-hot".into()));
            }
        }
    }
    Ok(dims)
}

impl ClassWeights {
    pub fn from_target(target: &Tensor) -> Result<Self> {
        let (n, c, h, w) = check_hard(target)?;
        let hw = h * w;
        let mut counts = vec![0u64; c];
        for b in 0..n {
            for (k, count) in counts.iter_mut().enumerate() {
                let base = (b * c + k) * hw;
                *count += target.data()[base..base + hw].iter().filter(|&&v| v == 1.0).count() as u64;
            }
        }
        let total = (n * hw) as u64;
        let w = counts.iter().map(|&ni| 1.0 - ni as f64 / total as f64).collect();
        Ok(ClassWeights { w, counts, total })
    }
}

/// Mean over batch and pixels of `−Σ_i w_i·y_i·log(ỹ_i + 1e−12)`.
pub fn weighted_cross_entropy<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let weights = ClassWeights::from_target(target)?;
    let (n, c, h, w) = target.dims4();
    let hw = h * w;
    let scale = -1.0 / (n * hw) as f64;
    let mut k = target.clone();
    for b in 0..n {
        for (ch, wi) in weights.w.iter().enumerate().take(c) {
            let base = (b * c + ch) * hw;
            for v in &mut k.data_mut()[base..base + hw] {
                *v *= wi * scale;
            }
        }
    }
    Ok(pred.ln_eps(LOG_FLOOR).mul_const(&k).sum())
}

/// Plain (unweighted) cross-entropy against a soft target, used by the DAE.
pub fn soft_cross_entropy<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() || target.shape().len() != 4 {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let (n, _, h, w) = target.dims4();
    let k = target.map(|v| -v / (n * h * w) as f64);
    Ok(pred.ln_eps(LOG_FLOOR).mul_const(&k).sum())
}

fn half_mse<'t>(scores: Var<'t>, target: f64) -> Result<Var<'t>> {
    if scores.value().is_empty() {
        return Err(Error::Contract("empty score batch".into()));
    }
    Ok(scores.add_scalar(-target).square().mean().mul_scalar(0.5))
}

/// Real part `½·mean((d_real − 1)²)`.
pub fn real_component<'t>(d_real: Var<'t>) -> Result<Var<'t>> {
    half_mse(d_real, 1.0)
}

/// Fake part `½·mean((d + 1)²)`, averaging the predicted and corrupted
/// sources with equal weight when both are given.
pub fn fake_component<'t>(d_pred: Option<Var<'t>>, d_corr: Option<Var<'t>>) -> Result<Var<'t>> {
    match (d_pred, d_corr) {
        (Some(p), Some(c)) => Ok(half_mse(p, -1.0)?.add(half_mse(c, -1.0)?).mul_scalar(0.5)),
        (Some(f), None) | (None, Some(f)) => half_mse(f, -1.0),
        (None, None) => Err(Error::Contract("discriminator loss needs at least one fake source".into())),
    }
}

/// Least-squares discriminator objective with labels +1 real, −1 fake.
pub fn discriminator_loss<'t>(d_real: Var<'t>, d_pred: Option<Var<'t>>, d_corr: Option<Var<'t>>) -> Result<Var<'t>> {
    Ok(real_component(d_real)?.add(fake_component(d_pred, d_corr)?))
}

/// `½·mean(d²)`: drives predicted-mask scores to the decision value 0.
pub fn adversarial_generator_loss(d_pred: Var<'_>) -> Result<Var<'_>> {
    half_mse(d_pred, 0.0)
}
