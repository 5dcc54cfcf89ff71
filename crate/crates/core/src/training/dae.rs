//! Denoising autoencoder training on clean/corrupted mask pairs.

use super::batch::{chunks, gather, Stream};
use super::losses::soft_cross_entropy;
use crate::augment::{corrupt_mask, CorruptionSpec};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::models::{build_dae, save_checkpoint, CheckpointMeta, Dae, DaeConfig, Model, Pass};
use crate::run::RunDir;
use advtta_tensor::{Adam, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const DAE_CHECKPOINT: &str = "checkpoints/dae_best.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaeTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub filters: Vec<usize>,
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for DaeTrainConfig {
    fn default() -> Self {
        DaeTrainConfig {
            lr: 1e-4,
            batch_size: 12,
            max_epochs: 200,
            early_stop_patience: 20,
            filters: vec![32, 64, 128, 256, 512],
            max_steps_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DaeOutcome {
    /// Best held-out checkpoint.
    pub dae: Dae,
    pub best_epoch: usize,
    pub best_val_ce: f64,
    pub epochs_run: usize,
    /// Held-out cross-entropy per epoch.
    pub val_ce: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

fn stack_masks(masks: &[LabelMap]) -> Tensor {
    Tensor::stack(&masks.iter().map(LabelMap::to_tensor).collect::<Vec<_>>())
}

fn corrupt_all(masks: &[LabelMap], spec: &CorruptionSpec, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let out: Vec<Tensor> = masks.iter().map(|m| corrupt_mask(m, spec, rng).map(|c| c.to_tensor())).collect::<Result<_>>()?;
    Ok(Tensor::stack(&out))
}

/// Mean cross-entropy of the DAE reconstruction of `noisy` against `clean`.
pub fn reconstruction_ce(dae: &Dae, noisy: &Tensor, clean: &Tensor, batch: usize) -> Result<f64> {
    let n = noisy.shape()[0];
    let mut total = 0.0;
    for idx in chunks(n, batch) {
        let tape = Tape::new();
        let out = dae.forward(&tape, tape.constant(gather(noisy, &idx)), Pass::FROZEN)?;
        total += soft_cross_entropy(out, &gather(clean, &idx))?.item() * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Minimises `CE(DAE(corrupt(y)), y)` over `masks`, early-stopping on a
/// fixed corruption of `held_out`. Writes the best model to `run` if given.
pub fn train_dae(
    masks: &[LabelMap],
    held_out: &[LabelMap],
    corruption: &CorruptionSpec,
    cfg: &DaeTrainConfig,
    seed: u64,
    run: Option<&RunDir>,
) -> Result<DaeOutcome> {
    if masks.is_empty() || held_out.is_empty() {
        return Err(Error::Contract("DAE training needs non-empty training and held-out mask pools".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid DAE training config {cfg:?}")));
    }
    corruption.validate()?;
    let hw = masks[0].hw();
    let n_classes = masks[0].n_classes();
    let dae_cfg = DaeConfig { filters: cfg.filters.clone(), n_classes, input_hw: hw, ..DaeConfig::default() };
    let mut dae = build_dae(&dae_cfg, seed)?;
    let mut opt = Adam::new(cfg.lr);
    let clean = stack_masks(masks);
    let val_clean = stack_masks(held_out);
    let val_noisy = corrupt_all(held_out, corruption, &mut crate::seeded!(seed, "dae-val-corrupt"))?;
    let b = cfg.batch_size;
    let mut steps = masks.len().div_ceil(b);
    if let Some(cap) = cfg.max_steps_per_epoch {
        steps = steps.min(cap);
    }
    let mut stream = Stream::new(masks.len(), seed, "dae-masks");
    let mut best = (f64::INFINITY, 0usize, dae.clone());
    let mut val_ce = Vec::new();
    let mut epoch = 0;
    while epoch < cfg.max_epochs {
        for step in 0..steps {
            let idx = stream.next_batch(b);
            let picked: Vec<LabelMap> = idx.iter().map(|&i| masks[i].clone()).collect();
            let noisy = corrupt_all(&picked, corruption, &mut crate::seeded!(seed, "dae-corrupt", epoch, step))?;
            let tape = Tape::new();
            let out = dae.forward(&tape, tape.constant(noisy), Pass::TRAIN)?;
            let loss = soft_cross_entropy(out, &gather(&clean, &idx))?;
            if !loss.item().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    phase: "dae".into(),
                    detail: format!("loss became {}", loss.item()),
                });
            }
            let g = tape.backward(loss);
            opt.step(dae.store_mut().iter_mut(), &g);
            dae.store_mut().apply_buffers(&tape.buffer_updates());
        }
        let ce = reconstruction_ce(&dae, &val_noisy, &val_clean, b)?;
        val_ce.push(ce);
        if ce < best.0 {
            best = (ce, epoch, dae.clone());
        }
        if let Some(run) = run {
            run.log(format!("dae epoch {epoch}: held-out ce {ce:.5}"))?;
        }
        epoch += 1;
        if epoch - 1 - best.1 >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_val_ce, best_epoch, dae) = best;
    let checkpoint = match run {
        Some(run) => {
            let path = run.join(DAE_CHECKPOINT);
            save_checkpoint(&path, &dae, &CheckpointMeta::for_model(&dae, seed, best_epoch, Some(best_val_ce)))?;
            Some(PathBuf::from(DAE_CHECKPOINT))
        }
        None => None,
    };
    Ok(DaeOutcome { dae, best_epoch, best_val_ce, epochs_run: epoch, val_ce, checkpoint })
}
