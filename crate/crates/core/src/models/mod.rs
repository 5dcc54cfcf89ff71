//! Network builders: UNet segmentor, mask discriminator, input adaptor, and
//! mask denoising autoencoder.

pub mod adaptor;
pub mod checkpoint;
pub mod dae;
pub mod discriminator;
mod layers;
pub mod segmentor;

pub use adaptor::{build_adaptor, Adaptor, AdaptorConfig};
pub use checkpoint::{load_checkpoint, restore_into, save_checkpoint, CheckpointMeta};
pub use dae::{build_dae, Dae, DaeConfig};
pub use discriminator::{build_discriminator, Discriminator, DiscriminatorConfig};
pub use segmentor::{build_segmentor, Segmentor, SegmentorConfig};

use crate::error::{Error, Result};
use advtta_tensor::{Param, Tape, Tensor, Var};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// How a forward pass treats model state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics for normalisation and a power-iteration step for
    /// spectral norms; the resulting buffer updates are recorded on the tape.
    pub train: bool,
    /// Bind weights as trainable so gradients reach them.
    pub learn: bool,
}

impl Pass {
    /// Training forward: batch statistics, gradients to weights.
    pub const TRAIN: Pass = Pass { train: true, learn: true };
    /// Frozen evaluation: stored statistics, no weight gradients.
    pub const FROZEN: Pass = Pass { train: false, learn: false };
}

/// Ordered, named model state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub(crate) fn push(&mut self, p: Param) {
        assert!(!self.index.contains_key(&p.name), "duplicate parameter {}", p.name);
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Binds a weight to the tape (trainable when `learn`); buffers are constants.
    pub fn bind<'t>(&self, tape: &'t Tape, name: &str, learn: bool) -> Var<'t> {
        let p = self.get(name);
        if p.is_weight() {
            tape.param(p, learn)
        } else {
            tape.constant(p.value.clone())
        }
    }

    /// Applies buffer updates recorded on a tape; names not owned here are ignored.
    pub fn apply_buffers(&mut self, updates: &[(String, Tensor)]) {
        for (name, value) in updates {
            if let Some(&i) = self.index.get(name) {
                self.params[i].value = value.clone();
            }
        }
    }

    /// Number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.params.iter().filter(|p| p.is_weight()).map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, roles, shapes and values.
    pub fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([u8::from(p.is_weight())]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Replaces every value with the one of the same name in `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let Some(&i) = other.index.get(&p.name) else {
                return Err(Error::Shape(format!("checkpoint lacks {}", p.name)));
            };
            let q = &other.params[i];
            if q.value.shape() != p.value.shape() || q.role != p.role {
                return Err(Error::Shape(format!(
                    "{}: checkpoint shape {:?}, model {:?}",
                    p.name,
                    q.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = q.value.clone();
        }
        Ok(())
    }
}

/// Anything that owns a [`ParamStore`].
pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Short architecture tag used in checkpoints.
    fn kind(&self) -> &'static str;
    /// Architecture description serialised into checkpoint sidecars.
    fn config_json(&self) -> serde_json::Value;

    fn state_hash(&self) -> String {
        self.store().state_hash()
    }

    fn weight_count(&self) -> usize {
        self.store().weight_count()
    }
}

/// SHA-256 of a canonical JSON rendering, used for config fingerprints.
pub fn json_hash(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}
