//! The alternating loop: (a) supervised segmentor step, (b) discriminator
//! step, (c) adversarial segmentor step, then per-epoch validation.

use super::batch::{chunks, gather, stack_images, stack_labels, Stream};
use super::losses::{adversarial_generator_loss, discriminator_loss, weighted_cross_entropy};
use super::TrainConfig;
use crate::augment::{corrupt_mask, instance_noise, roto_translate_masks, CorruptionSpec};
use crate::data::{LabelMap, Sample, SplitSets};
use crate::diagnostics::{classify_convergence, record_epoch, DiscBatch, LossTrace, TraceRow, DEFAULT_TAIL, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::eval::mean_foreground_dice;
use crate::models::{
    build_discriminator, build_segmentor, save_checkpoint, CheckpointMeta, Discriminator, Model, Pass, Segmentor,
};
use crate::run::{RunDir, RunManifest, EVENTS_FILE};
use advtta_tensor::{Adam, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

pub const SEGMENTOR_CHECKPOINT: &str = "checkpoints/segmentor_best.bin";
pub const DISCRIMINATOR_CHECKPOINT: &str = "checkpoints/discriminator_final.bin";
pub const TRACE_FILE: &str = "trace.csv";

/// How often each update ran and what the discriminator consumed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub supervised_steps: u64,
    pub discriminator_steps: u64,
    pub adversarial_steps: u64,
    pub real_masks_seen: u64,
    pub predicted_masks_seen: u64,
    pub corrupted_masks_seen: u64,
}

impl UpdateCounters {
    pub fn as_map(&self) -> std::collections::BTreeMap<String, u64> {
        [
            ("supervised_steps", self.supervised_steps),
            ("discriminator_steps", self.discriminator_steps),
            ("adversarial_steps", self.adversarial_steps),
            ("real_masks_seen", self.real_masks_seen),
            ("predicted_masks_seen", self.predicted_masks_seen),
            ("corrupted_masks_seen", self.corrupted_masks_seen),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Everything the loop carries between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_dice: f64,
    /// Best-validation segmentor.
    pub segmentor: Segmentor,
    /// Final-epoch discriminator.
    pub discriminator: Discriminator,
    pub segmentor_optimizer: Adam,
    pub discriminator_optimizer: Adam,
    pub trace: LossTrace,
    pub counters: UpdateCounters,
    pub stopped_early: bool,
}

struct Pools {
    annotated_x: Tensor,
    annotated_y: Tensor,
    unpaired_x: Tensor,
    val_x: Tensor,
    val_y: Tensor,
    val_labels: Vec<LabelMap>,
    class_names: Vec<String>,
}

fn pools(sets: &SplitSets) -> Result<Pools> {
    if sets.train_annotated.is_empty() {
        return Err(Error::Contract("training needs a non-empty annotated pool".into()));
    }
    if sets.val.is_empty() {
        return Err(Error::Contract("training needs a non-empty validation pool".into()));
    }
    let unpaired: &[Sample] = if sets.train_unpaired.is_empty() { &sets.train_annotated } else { &sets.train_unpaired };
    let val_labels: Vec<LabelMap> = sets
        .val
        .iter()
        .map(|s| s.label.clone().ok_or_else(|| Error::Contract(format!("validation sample {:?} is unlabelled", s.key()))))
        .collect::<Result<_>>()?;
    let class_names = val_labels[0].class_names.clone();
    Ok(Pools {
        annotated_x: stack_images(&sets.train_annotated)?,
        annotated_y: stack_labels(&sets.train_annotated)?,
        unpaired_x: stack_images(unpaired)?,
        val_x: stack_images(&sets.val)?,
        val_y: stack_labels(&sets.val)?,
        val_labels,
        class_names,
    })
}

fn corrupt_batch<R: Rng>(y: &Tensor, names: &[String], spec: &CorruptionSpec, rng: &mut R) -> Result<Tensor> {
    let n = y.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = LabelMap::from_tensor(&y.select(i), names.to_vec())?;
        out.push(corrupt_mask(&m, spec, rng)?.to_tensor());
    }
    Ok(Tensor::stack(&out))
}

fn predict(seg: &Segmentor, x: &Tensor, batch: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for idx in chunks(x.shape()[0], batch) {
        let tape = Tape::new();
        parts.push((*seg.forward(&tape, tape.constant(gather(x, &idx)), Pass::FROZEN)?.value()).clone());
    }
    Ok(Tensor::stack(&parts))
}

struct Validation {
    ce: f64,
    dice: f64,
    pred: Tensor,
}

fn validate(seg: &Segmentor, p: &Pools, batch: usize) -> Result<Validation> {
    let pred = predict(seg, &p.val_x, batch)?;
    let n = pred.shape()[0];
    let mut ce = 0.0;
    for idx in chunks(n, batch) {
        let tape = Tape::new();
        let l = weighted_cross_entropy(tape.constant(gather(&pred, &idx)), &gather(&p.val_y, &idx))?;
        ce += l.item() * idx.len() as f64;
    }
    let mut dice = 0.0;
    for (i, truth) in p.val_labels.iter().enumerate() {
        let m = LabelMap::from_tensor(&pred.select(i), p.class_names.clone())?;
        dice += mean_foreground_dice(&m.harden(), truth)?;
    }
    Ok(Validation { ce: ce / n as f64, dice: dice / n as f64, pred })
}

fn diverged(run: &RunDir, epoch: usize, step: usize, phase: &str, loss: f64) -> Error {
    let detail = format!("loss became {loss}");
    let dump = serde_json::json!({ "epoch": epoch, "step": step, "phase": phase, "loss": loss.to_string() });
    let path = run.join("divergence.json");
    // Best effort: the divergence itself is the error worth reporting.
    let _ = std::fs::write(&path, dump.to_string());
    let _ = run.log(format!("divergence at epoch {epoch} step {step} ({phase}): {detail}"));
    Error::Divergence { epoch, step, phase: phase.to_string(), detail }
}

/// Trains segmentor and discriminator on `sets`, writing checkpoints,
/// `trace.csv`, `events.log` and `manifest.json` into `run`.
pub fn train(sets: &SplitSets, cfg: &TrainConfig, seed: u64, run: &RunDir) -> Result<(TrainState, RunManifest)> {
    cfg.validate()?;
    let p = pools(sets)?;
    let (_, n_classes, h, w) = p.annotated_y.dims4();
    let mut seg = build_segmentor(&cfg.segmentor_config((h, w), n_classes), seed)?;
    let mut disc = build_discriminator(&cfg.discriminator_config((h, w), n_classes), seed)?;
    let mut seg_opt = Adam::new(cfg.lr);
    let mut disc_opt = Adam::new(cfg.lr);
    let adversarial = cfg.adversarial_weight > 0.0;
    let b = cfg.batch_size;
    let n_annot = p.annotated_x.shape()[0];
    let n_unpaired = p.unpaired_x.shape()[0];
    let mut steps = n_annot.max(n_unpaired).div_ceil(b);
    if let Some(cap) = cfg.max_steps_per_epoch {
        steps = steps.min(cap);
    }
    let mut sup_stream = Stream::new(n_annot, seed, "annotated");
    let mut img_stream = Stream::new(n_unpaired, seed, "unpaired-images");
    let mut mask_stream = Stream::new(n_annot, seed, "unpaired-masks");

    let val_corrupted = if cfg.fake_anchors_on {
        Some(corrupt_batch(&p.val_y, &p.class_names, &cfg.corruption, &mut crate::seeded!(seed, "val-corrupt"))?)
    } else {
        None
    };
    let train_corrupted = if cfg.fake_anchors_on {
        Some(corrupt_batch(&p.annotated_y, &p.class_names, &cfg.corruption, &mut crate::seeded!(seed, "train-corrupt"))?)
    } else {
        None
    };

    run.log(format!(
        "train: {n_annot} annotated, {n_unpaired} unpaired, {} validation slices; {steps} steps/epoch; order (a) supervised -> (b) discriminator -> (c) adversarial; adversarial={adversarial}",
        p.val_x.shape()[0]
    ))?;
    let mut counters = UpdateCounters::default();
    let mut trace = LossTrace::default();
    let mut best = (f64::INFINITY, f64::NAN, 0usize, seg.clone());
    let mut epoch = 0;
    let mut stopped_early = false;
    while epoch < cfg.max_epochs {
        for step in 0..steps {
            // (a) supervised
            let idx = sup_stream.next_batch(b);
            let tape = Tape::new();
            let pred = seg.forward(&tape, tape.constant(gather(&p.annotated_x, &idx)), Pass::TRAIN)?;
            let loss = weighted_cross_entropy(pred, &gather(&p.annotated_y, &idx))?;
            if !loss.item().is_finite() {
                return Err(diverged(run, epoch, step, "supervised", loss.item()));
            }
            let g = tape.backward(loss);
            seg_opt.step(seg.store_mut().iter_mut(), &g);
            seg.store_mut().apply_buffers(&tape.buffer_updates());
            counters.supervised_steps += 1;
            if !adversarial {
                continue;
            }

            // (b) discriminator on real, predicted and corrupted masks
            let img_idx = img_stream.next_batch(b);
            let xu = gather(&p.unpaired_x, &img_idx);
            let fake = {
                let tape = Tape::new();
                let out = seg.forward(&tape, tape.constant(xu.clone()), Pass { train: true, learn: false })?;
                (*out.value()).clone()
            };
            let real = gather(&p.annotated_y, &mask_stream.next_batch(b));
            let mut rng = crate::seeded!(seed, "disc-step", epoch, step);
            let mut parts = vec![real, fake];
            if cfg.fake_anchors_on {
                parts.push(corrupt_batch(&parts[0], &p.class_names, &cfg.corruption, &mut rng)?);
            }
            let aug: Vec<Tensor> = parts
                .iter()
                .map(|t| instance_noise(&roto_translate_masks(t, &cfg.augment, &mut rng), cfg.augment.instance_noise_std, &mut rng))
                .collect();
            let sizes: Vec<usize> = aug.iter().map(|t| t.shape()[0]).collect();
            let tape = Tape::new();
            let scores = disc.forward(&tape, tape.constant(Tensor::stack(&aug)), Pass::TRAIN)?;
            let d_real = scores.rows(0, sizes[0]);
            let d_pred = scores.rows(sizes[0], sizes[0] + sizes[1]);
            let d_corr = cfg.fake_anchors_on.then(|| scores.rows(sizes[0] + sizes[1], sizes.iter().sum()));
            let loss = discriminator_loss(d_real, Some(d_pred), d_corr)?;
            if !loss.item().is_finite() {
                return Err(diverged(run, epoch, step, "discriminator", loss.item()));
            }
            let g = tape.backward(loss);
            disc_opt.step(disc.store_mut().iter_mut(), &g);
            disc.store_mut().apply_buffers(&tape.buffer_updates());
            counters.discriminator_steps += 1;
            counters.real_masks_seen += sizes[0] as u64;
            counters.predicted_masks_seen += sizes[1] as u64;
            if cfg.fake_anchors_on {
                counters.corrupted_masks_seen += sizes[2] as u64;
            }

            // (c) adversarial segmentor step through the frozen discriminator
            let tape = Tape::new();
            let pred = seg.forward(&tape, tape.constant(xu), Pass::TRAIN)?;
            let score = disc.forward(&tape, pred, Pass::FROZEN)?;
            let loss = adversarial_generator_loss(score)?.mul_scalar(cfg.adversarial_weight);
            if !loss.item().is_finite() {
                return Err(diverged(run, epoch, step, "adversarial", loss.item()));
            }
            let g = tape.backward(loss);
            seg_opt.step(seg.store_mut().iter_mut(), &g);
            seg.store_mut().apply_buffers(&tape.buffer_updates());
            counters.adversarial_steps += 1;
        }

        let val = validate(&seg, &p, b)?;
        if !val.ce.is_finite() {
            return Err(diverged(run, epoch, steps, "validation", val.ce));
        }
        let val_c = record_epoch(
            &disc,
            &[DiscBatch { real: p.val_y.clone(), predicted: val.pred, corrupted: val_corrupted.clone() }],
        )?;
        let train_c = record_epoch(
            &disc,
            &[DiscBatch {
                real: p.annotated_y.clone(),
                predicted: predict(&seg, &p.unpaired_x, b)?,
                corrupted: train_corrupted.clone(),
            }],
        )?;
        trace.push(TraceRow {
            epoch,
            real_train: train_c.real,
            fake_train: train_c.fake,
            real_val: val_c.real,
            fake_val: val_c.fake,
            seg_val_ce: val.ce,
        })?;
        trace.write_csv(&run.join(TRACE_FILE))?;
        let improved = val.ce < best.0;
        if improved {
            best = (val.ce, val.dice, epoch, seg.clone());
        }
        run.log(format!(
            "epoch {epoch}: val_ce {:.5} val_dice {:.4} d_real_val {:.4} d_fake_val {:.4}{}",
            val.ce,
            val.dice,
            val_c.real,
            val_c.fake,
            if improved { " (best)" } else { "" }
        ))?;
        epoch += 1;
        if epoch - 1 - best.2 >= cfg.early_stop_patience {
            stopped_early = true;
            run.log(format!("early stop after epoch {}: no improvement for {} epochs", epoch - 1, cfg.early_stop_patience))?;
            break;
        }
    }

    let (best_loss, best_dice, best_epoch, best_seg) = best;
    save_checkpoint(
        &run.join(SEGMENTOR_CHECKPOINT),
        &best_seg,
        &CheckpointMeta::for_model(&best_seg, seed, best_epoch, Some(best_loss)),
    )?;
    let final_epoch = epoch.saturating_sub(1);
    save_checkpoint(
        &run.join(DISCRIMINATOR_CHECKPOINT),
        &disc,
        &CheckpointMeta::for_model(&disc, seed, final_epoch, trace.rows.last().map(|r| r.real_val + r.fake_val)),
    )?;

    let mut manifest = RunManifest::new("train", serde_json::to_value(cfg)?, seed);
    let [annotated, unpaired, val, test] = sets.patients();
    for (k, v) in [("train_annotated", annotated), ("train_unpaired", unpaired), ("val", val), ("test", test)] {
        manifest.splits.insert(k.into(), v);
    }
    manifest.checkpoints.insert("segmentor".into(), PathBuf::from(SEGMENTOR_CHECKPOINT));
    manifest.checkpoints.insert("discriminator".into(), PathBuf::from(DISCRIMINATOR_CHECKPOINT));
    manifest.files.insert("trace".into(), TRACE_FILE.into());
    manifest.files.insert("events".into(), EVENTS_FILE.into());
    manifest.counters = counters.as_map();
    manifest.notes.insert("best_epoch".into(), best_epoch.into());
    manifest.notes.insert("best_val_ce".into(), best_loss.into());
    manifest.notes.insert("best_val_dice".into(), best_dice.into());
    manifest.notes.insert("epochs_run".into(), epoch.into());
    manifest.notes.insert("stopped_early".into(), stopped_early.into());
    manifest.notes.insert("smoothness_on".into(), cfg.smoothness_on.into());
    manifest.notes.insert("fake_anchors_on".into(), cfg.fake_anchors_on.into());
    if trace.len() >= DEFAULT_TAIL {
        let v = classify_convergence(&trace, DEFAULT_TAIL, DEFAULT_TOL)?;
        run.log(format!("convergence verdict (advisory): {:?}", v.verdict))?;
        manifest.verdicts.insert("convergence".into(), serde_json::to_value(v)?);
    }
    manifest.save(run)?;
    run.log(format!("training done: best epoch {best_epoch}, val_ce {best_loss:.5}, val_dice {best_dice:.4}"))?;

    let state = TrainState {
        epoch,
        best_epoch,
        best_val_loss: best_loss,
        best_val_dice: best_dice,
        segmentor: best_seg,
        discriminator: disc,
        segmentor_optimizer: seg_opt,
        discriminator_optimizer: disc_opt,
        trace,
        counters,
        stopped_early,
    };
    Ok((state, manifest))
}
