//! Losses, the alternating semi-supervised adversarial loop, and DAE training.

mod adversarial;
pub mod batch;
mod dae;
pub mod losses;

pub use adversarial::{train, TrainState, UpdateCounters, DISCRIMINATOR_CHECKPOINT, SEGMENTOR_CHECKPOINT, TRACE_FILE};
pub use dae::{train_dae, DaeOutcome, DaeTrainConfig, DAE_CHECKPOINT};
pub use losses::{
    adversarial_generator_loss, discriminator_loss, fake_component, real_component, soft_cross_entropy,
    weighted_cross_entropy, ClassWeights, LOG_FLOOR,
};

use crate::augment::{AugmentSpec, CorruptionSpec};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorConfig, SegmentorConfig};
use serde::{Deserialize, Serialize};

/// Optimiser, schedule, ablation switches and architecture widths.
///
/// Random streams for augmentation and corruption derive from the run seed;
/// the `seed` fields inside `corruption` and `augment` are not consulted here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Spectral normalisation and tanh in the discriminator.
    pub smoothness_on: bool,
    /// Corrupted real masks as a second fake source.
    pub fake_anchors_on: bool,
    /// Scale of the adversarial segmentor loss; 0 skips steps (b) and (c).
    pub adversarial_weight: f64,
    pub unet_depth: usize,
    pub unet_base_filters: usize,
    pub disc_filters: Vec<usize>,
    /// Optional cap on steps per epoch (an epoch is otherwise one pass over
    /// the larger of the annotated and unpaired pools).
    pub max_steps_per_epoch: Option<usize>,
    pub corruption: CorruptionSpec,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 12,
            max_epochs: 200,
            early_stop_patience: 20,
            smoothness_on: true,
            fake_anchors_on: true,
            adversarial_weight: 1.0,
            unet_depth: 4,
            unet_base_filters: 32,
            disc_filters: vec![32, 64, 128, 256, 512],
            max_steps_per_epoch: None,
            corruption: CorruptionSpec::default(),
            augment: AugmentSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::Config(format!("adversarial_weight must be >= 0, got {}", self.adversarial_weight)));
        }
        if self.disc_filters.len() != 5 {
            return Err(Error::Config(format!("disc_filters needs 5 widths, got {}", self.disc_filters.len())));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(Error::Config("max_steps_per_epoch must be at least 1".into()));
        }
        self.corruption.validate()?;
        self.augment.validate()
    }

    pub fn segmentor_config(&self, input_hw: (usize, usize), n_classes: usize) -> SegmentorConfig {
        SegmentorConfig { depth: self.unet_depth, base_filters: self.unet_base_filters, n_classes, input_hw }
    }

    pub fn discriminator_config(&self, input_hw: (usize, usize), n_classes: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            filters: self.disc_filters.clone(),
            smoothness: self.smoothness_on,
            n_classes,
            input_hw,
            ..DiscriminatorConfig::default()
        }
    }
}
