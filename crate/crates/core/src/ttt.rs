//! Test-time training: per-image tuning of an input adaptor against a
//! frozen shape prior (the trained discriminator, or a DAE baseline).

use crate::data::{GridImage, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::eval::{score_label_maps, ClassScores};
use crate::models::{build_adaptor, Adaptor, AdaptorConfig, Dae, Discriminator, Model, Pass, Segmentor};
use crate::training::{adversarial_generator_loss, soft_cross_entropy};
use advtta_tensor::{Adam, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    Adversarial,
    Dae,
}

impl std::str::FromStr for Driver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Driver::Adversarial),
            "dae" => Ok(Driver::Dae),
            other => Err(Error::Config(format!("unknown TTT driver {other:?} (expected adversarial or dae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TTTConfig {
    pub n_iter: usize,
    pub lr: f64,
    /// Fresh identity adaptor per image; off carries one adaptor across the stream.
    pub reset_per_instance: bool,
    pub driver: Driver,
    pub adaptor: AdaptorConfig,
}

impl Default for TTTConfig {
    fn default() -> Self {
        TTTConfig { n_iter: 50, lr: 1e-4, reset_per_instance: true, driver: Driver::Adversarial, adaptor: AdaptorConfig::default() }
    }
}

impl TTTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("TTT lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTTResult {
    pub patient_id: String,
    pub slice_index: usize,
    #[serde(skip)]
    pub mask_before: Option<LabelMap>,
    #[serde(skip)]
    pub mask_after: Option<LabelMap>,
    /// Loss before each of the `n_iter` updates.
    pub loss_trace: Vec<f64>,
    pub adaptor_sigma_final: f64,
    /// Set when a non-finite loss stopped the adaptation early.
    pub diverged: bool,
    pub steps_taken: usize,
}

impl TTTResult {
    pub fn before(&self) -> &LabelMap {
        self.mask_before.as_ref().expect("mask_before is set by adaptation")
    }
    pub fn after(&self) -> &LabelMap {
        self.mask_after.as_ref().expect("mask_after is set by adaptation")
    }
}

/// The frozen prior that scores a soft prediction.
#[derive(Clone, Copy)]
pub enum Prior<'m> {
    Discriminator(&'m Discriminator),
    Dae(&'m Dae),
}

impl Prior<'_> {
    fn loss<'t>(&self, tape: &'t Tape, pred: Var<'t>) -> Result<Var<'t>> {
        match self {
            Prior::Discriminator(d) => adversarial_generator_loss(d.forward(tape, pred, Pass::FROZEN)?),
            Prior::Dae(dae) => {
                // Pseudo-label: the DAE's reconstruction, with its path cut.
                let target = dae.forward(tape, pred.detach(), Pass::FROZEN)?.value();
                soft_cross_entropy(pred, &target)
            }
        }
    }
}

/// Stateless prediction with the segmentor alone.
pub fn predict_soft(seg: &Segmentor, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok((*seg.forward(&tape, tape.constant(x.clone()), Pass::FROZEN)?.value()).clone())
}

fn hard(soft: &Tensor, names: &[String]) -> Result<LabelMap> {
    Ok(LabelMap::from_tensor(soft, names.to_vec())?.harden())
}

fn class_names(seg: &Segmentor) -> Vec<String> {
    let c = seg.cfg.n_classes;
    if c == 3 {
        crate::data::default_class_names()
    } else {
        (0..c).map(|k| if k == 0 { "background".to_string() } else { format!("class{k}") }).collect()
    }
}

/// Runs `n_iter` Adam steps on `adaptor` for one image.
fn adapt(x: &GridImage, seg: &Segmentor, prior: Prior<'_>, cfg: &TTTConfig, adaptor: &mut Adaptor, opt: &mut Adam) -> Result<TTTResult> {
    if x.hw() != seg.cfg.input_hw {
        return Err(Error::Shape(format!("image {:?} does not match the segmentor input {:?}", x.hw(), seg.cfg.input_hw)));
    }
    let names = class_names(seg);
    let xt = x.to_tensor();
    let learn = Pass { train: false, learn: true };
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut before = None;
    let mut best: Option<(f64, Tensor)> = None;
    let mut diverged = false;
    for _ in 0..cfg.n_iter {
        let tape = Tape::new();
        let z = adaptor.forward(&tape, tape.constant(xt.clone()), learn);
        let pred = seg.forward(&tape, z, Pass::FROZEN)?;
        let soft = (*pred.value()).clone();
        let loss = prior.loss(&tape, pred)?;
        let lv = loss.item();
        if before.is_none() {
            before = Some(soft.clone());
        }
        if !lv.is_finite() || !soft.all_finite() {
            diverged = true;
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| lv < *b) {
            best = Some((lv, soft));
        }
        trace.push(lv);
        let g = tape.backward(loss);
        opt.step(adaptor.store_mut().iter_mut(), &g);
    }
    let steps_taken = trace.len();
    let after = if diverged {
        // Best-so-far mask, or the untouched prediction if nothing was finite.
        match best {
            Some((_, soft)) => soft,
            None => predict_soft(seg, &xt)?,
        }
    } else {
        let tape = Tape::new();
        let z = adaptor.forward(&tape, tape.constant(xt.clone()), Pass::FROZEN);
        (*seg.forward(&tape, z, Pass::FROZEN)?.value()).clone()
    };
    let before = match before {
        Some(b) => b,
        None => {
            let tape = Tape::new();
            let z = adaptor.forward(&tape, tape.constant(xt), Pass::FROZEN);
            (*seg.forward(&tape, z, Pass::FROZEN)?.value()).clone()
        }
    };
    let mask_before = hard(&before, &names)?;
    let mask_after = if cfg.n_iter == 0 { mask_before.clone() } else { hard(&after, &names)? };
    Ok(TTTResult {
        patient_id: x.patient_id.clone(),
        slice_index: x.slice_index,
        mask_before: Some(mask_before),
        mask_after: Some(mask_after),
        loss_trace: trace,
        adaptor_sigma_final: adaptor.sigma(),
        diverged,
        steps_taken,
    })
}

fn fresh_adaptor(cfg: &TTTConfig, seed: u64, x: &GridImage) -> Result<Adaptor> {
    build_adaptor(&cfg.adaptor, crate::rng::derive_seed(seed, &[x.patient_id.as_str().into(), x.slice_index.into()]))
}

/// Adversarial TTT on one image: minimises `½·d(s(w(x)))²` over the adaptor only.
pub fn adapt_instance(x: &GridImage, seg: &Segmentor, disc: &Discriminator, cfg: &TTTConfig, seed: u64) -> Result<TTTResult> {
    cfg.validate()?;
    let mut adaptor = fresh_adaptor(cfg, seed, x)?;
    adapt(x, seg, Prior::Discriminator(disc), cfg, &mut adaptor, &mut Adam::new(cfg.lr))
}

/// DAE-driven TTT: cross-entropy against the detached DAE reconstruction.
pub fn adapt_instance_dae(x: &GridImage, seg: &Segmentor, dae: &Dae, cfg: &TTTConfig, seed: u64) -> Result<TTTResult> {
    cfg.validate()?;
    let mut adaptor = fresh_adaptor(cfg, seed, x)?;
    adapt(x, seg, Prior::Dae(dae), cfg, &mut adaptor, &mut Adam::new(cfg.lr))
}

/// One row per instance, foreground class and phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub class_name: String,
    pub dice: f64,
    pub iou: f64,
    pub hausdorff_px: f64,
    pub hausdorff_mm: f64,
    pub hausdorff_sentinel: bool,
}

impl MetricRecord {
    fn from_scores(s: &Sample, names: &[String], c: ClassScores) -> Self {
        MetricRecord {
            patient_id: s.image.patient_id.clone(),
            slice_index: s.image.slice_index,
            class_name: names[c.class_index].clone(),
            dice: c.dice,
            iou: c.iou,
            hausdorff_px: c.hausdorff_px,
            hausdorff_mm: c.hausdorff_mm,
            hausdorff_sentinel: c.hausdorff_sentinel,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub results: Vec<TTTResult>,
    pub before: Vec<MetricRecord>,
    pub after: Vec<MetricRecord>,
}

/// The models TTT needs; the prior matching `cfg.driver` must be present.
#[derive(Clone, Copy)]
pub struct TttModels<'m> {
    pub segmentor: &'m Segmentor,
    pub discriminator: Option<&'m Discriminator>,
    pub dae: Option<&'m Dae>,
}

/// Adapts every test sample and scores before/after masks against its label.
/// Instances are independent unless `reset_per_instance` is off, and
/// non-finite losses are flagged per instance without aborting the sweep.
pub fn evaluate_with_ttt(test: &[Sample], models: TttModels<'_>, cfg: &TTTConfig, seed: u64) -> Result<Evaluation> {
    cfg.validate()?;
    let prior = match cfg.driver {
        Driver::Adversarial => Prior::Discriminator(
            models.discriminator.ok_or_else(|| Error::Config("adversarial TTT needs a discriminator".into()))?,
        ),
        Driver::Dae => Prior::Dae(models.dae.ok_or_else(|| Error::Config("DAE-driven TTT needs a trained DAE".into()))?),
    };
    let names = class_names(models.segmentor);
    let mut eval = Evaluation::default();
    let mut carried: Option<(Adaptor, Adam)> = None;
    for s in test {
        let Some(truth) = &s.label else {
            return Err(Error::Contract(format!("test sample {:?} has no reference label", s.key())));
        };
        let (mut adaptor, mut opt) = match carried.take() {
            Some(state) if !cfg.reset_per_instance => state,
            _ => (fresh_adaptor(cfg, seed, &s.image)?, Adam::new(cfg.lr)),
        };
        let r = adapt(&s.image, models.segmentor, prior, cfg, &mut adaptor, &mut opt)?;
        if r.diverged {
            log::warn!("TTT diverged on {:?} after {} steps", s.key(), r.steps_taken);
        }
        let spacing = s.image.spacing_mm;
        for c in score_label_maps(r.before(), truth, spacing)? {
            eval.before.push(MetricRecord::from_scores(s, &names, c));
        }
        for c in score_label_maps(r.after(), truth, spacing)? {
            eval.after.push(MetricRecord::from_scores(s, &names, c));
        }
        eval.results.push(r);
        if !cfg.reset_per_instance {
            carried = Some((adaptor, opt));
        }
    }
    Ok(eval)
}
