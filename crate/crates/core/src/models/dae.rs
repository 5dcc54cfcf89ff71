//! Mask denoising autoencoder used as an alternative shape prior.

use super::layers::{add_batch_norm, add_conv, batch_norm, conv, he_std};
use super::{Model, ParamStore, Pass};
use crate::error::{Error, Result};
use advtta_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaeConfig {
    /// Encoder widths, mirroring the discriminator.
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub n_classes: usize,
    pub input_hw: (usize, usize),
}

impl Default for DaeConfig {
    fn default() -> Self {
        DaeConfig { filters: vec![32, 64, 128, 256, 512], strides: vec![1, 1, 2, 2, 2], n_classes: 3, input_hw: (224, 224) }
    }
}

#[derive(Clone, Debug)]
pub struct Dae {
    pub cfg: DaeConfig,
    store: ParamStore,
}

pub fn build_dae(cfg: &DaeConfig, seed: u64) -> Result<Dae> {
    if cfg.filters.is_empty() || cfg.filters.len() != cfg.strides.len() || cfg.n_classes < 2 {
        return Err(Error::Config(format!("invalid DAE config {cfg:?}")));
    }
    if cfg.strides.iter().any(|&s| s != 1 && s != 2) {
        return Err(Error::Config("DAE strides must be 1 or 2".into()));
    }
    let m = 1usize << cfg.strides.iter().filter(|&&s| s == 2).count();
    let (h, w) = cfg.input_hw;
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!("DAE input {h}x{w} must be divisible by {m}")));
    }
    let mut rng = crate::seeded!(seed, "dae");
    let mut store = ParamStore::new();
    let mut cin = cfg.n_classes;
    for (i, (&f, &s)) in cfg.filters.iter().zip(&cfg.strides).enumerate() {
        let k = if s == 2 { 4 } else { 3 };
        add_conv(&mut store, &format!("enc{i}"), f, cin, k, false, he_std(cin, k), &mut rng);
        add_batch_norm(&mut store, &format!("enc{i}.bn"), f);
        cin = f;
    }
    for i in (0..cfg.filters.len()).rev() {
        let out = cfg.filters[i.saturating_sub(1)];
        add_conv(&mut store, &format!("dec{i}"), out, cin, 3, false, he_std(cin, 3), &mut rng);
        add_batch_norm(&mut store, &format!("dec{i}.bn"), out);
        cin = out;
    }
    add_conv(&mut store, "head", cfg.n_classes, cin, 1, true, he_std(cin, 1), &mut rng);
    Ok(Dae { cfg: cfg.clone(), store })
}

impl Dae {
    /// Maps `[N, C, H, W]` masks to `[N, C, H, W]` probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, pass: Pass) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.n_classes || (s[2], s[3]) != self.cfg.input_hw {
            return Err(Error::Shape(format!("DAE expects [N, {}, {:?}], got {s:?}", self.cfg.n_classes, self.cfg.input_hw)));
        }
        let st = &self.store;
        let mut h = x;
        for (i, &stride) in self.cfg.strides.iter().enumerate() {
            h = conv(st, tape, h, &format!("enc{i}"), stride, 1, pass.learn);
            h = batch_norm(st, tape, h, &format!("enc{i}.bn"), pass).relu();
        }
        for i in (0..self.cfg.filters.len()).rev() {
            if self.cfg.strides[i] == 2 {
                h = h.upsample2();
            }
            h = conv(st, tape, h, &format!("dec{i}"), 1, 1, pass.learn);
            h = batch_norm(st, tape, h, &format!("dec{i}.bn"), pass).relu();
        }
        Ok(conv(st, tape, h, "head", 1, 0, pass.learn).softmax_channels())
    }
}

impl Model for Dae {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn kind(&self) -> &'static str {
        "dae"
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }
}
