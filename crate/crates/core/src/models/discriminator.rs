//! Five-layer convolutional mask discriminator with a scalar linear head.

use super::layers::{add_conv, add_spectral_u, conv, he_std, spectral_sigma, spectral_weight};
use super::{Model, ParamStore, Pass};
use crate::error::{Error, Result};
use advtta_tensor::{conv_out_size, Param, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub filters: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Spectral normalisation with tanh activations when on; plain leaky
    /// rectifiers without weight normalisation when off.
    pub smoothness: bool,
    pub n_classes: usize,
    pub input_hw: (usize, usize),
    /// Power iterations run on each weight at build time.
    #[serde(default = "default_warmup")]
    pub sn_warmup: usize,
}

fn default_warmup() -> usize {
    15
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            filters: vec![32, 64, 128, 256, 512],
            strides: vec![1, 1, 2, 2, 2],
            kernel: 4,
            smoothness: true,
            n_classes: 3,
            input_hw: (224, 224),
            sn_warmup: default_warmup(),
        }
    }
}

const PAD: usize = 1;
const LEAK: f64 = 0.2;

impl DiscriminatorConfig {
    /// Spatial size after every layer, or a shape error if a layer collapses.
    fn feature_hw(&self) -> Result<(usize, usize)> {
        if self.filters.len() != self.strides.len() || self.filters.is_empty() {
            return Err(Error::Config("discriminator filters and strides must be non-empty and equally long".into()));
        }
        let (mut h, mut w) = self.input_hw;
        let too_small = || Error::Shape(format!("input {:?} too small for the discriminator", self.input_hw));
        for &s in &self.strides {
            h = conv_out_size(h, self.kernel, s, PAD).filter(|&v| v > 0).ok_or_else(too_small)?;
            w = conv_out_size(w, self.kernel, s, PAD).filter(|&v| v > 0).ok_or_else(too_small)?;
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    store: ParamStore,
    feat: usize,
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("discriminator needs at least two mask channels".into()));
    }
    let (fh, fw) = cfg.feature_hw()?;
    let mut rng = crate::seeded!(seed, "discriminator");
    let mut store = ParamStore::new();
    let mut cin = cfg.n_classes;
    for (i, &f) in cfg.filters.iter().enumerate() {
        let name = format!("conv{i}");
        add_conv(&mut store, &name, f, cin, cfg.kernel, true, he_std(cin, cfg.kernel), &mut rng);
        if cfg.smoothness {
            add_spectral_u(&mut store, &name, cfg.sn_warmup, &mut rng);
        }
        cin = f;
    }
    let feat = cin * fh * fw;
    let std = (1.0 / feat as f64).sqrt();
    store.push(Param::weight("head.w", Tensor::randn(&[1, feat], std, &mut rng)));
    store.push(Param::weight("head.b", Tensor::zeros(&[1])));
    if cfg.smoothness {
        add_spectral_u(&mut store, "head", cfg.sn_warmup, &mut rng);
    }
    Ok(Discriminator { cfg: cfg.clone(), store, feat })
}

impl Discriminator {
    /// Scores `[N, C, H, W]` masks, returning `[N, 1]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, pass: Pass) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.n_classes || (s[2], s[3]) != self.cfg.input_hw {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {}, {}, {}], got {s:?}",
                self.cfg.n_classes, self.cfg.input_hw.0, self.cfg.input_hw.1
            )));
        }
        let st = &self.store;
        let mut h = x;
        for (i, &stride) in self.cfg.strides.iter().enumerate() {
            let name = format!("conv{i}");
            h = if self.cfg.smoothness {
                let w = spectral_weight(st, tape, &name, pass);
                let b = st.bind(tape, &format!("{name}.b"), pass.learn);
                h.conv2d(w, Some(b), stride, PAD).tanh()
            } else {
                conv(st, tape, h, &name, stride, PAD, pass.learn).leaky_relu(LEAK)
            };
        }
        let flat = h.reshape(&[s[0], self.feat]);
        let w = if self.cfg.smoothness {
            spectral_weight(st, tape, "head", pass)
        } else {
            st.bind(tape, "head.w", pass.learn)
        };
        let b = st.bind(tape, "head.b", pass.learn);
        Ok(flat.linear(w, Some(b)))
    }

    /// Names of the spectrally normalised layers (empty when smoothness is off).
    pub fn normalized_layers(&self) -> Vec<String> {
        if !self.cfg.smoothness {
            return Vec::new();
        }
        (0..self.cfg.filters.len()).map(|i| format!("conv{i}")).chain(["head".to_string()]).collect()
    }

    /// The weight a frozen pass actually uses for `layer`: `W / σ̂`.
    pub fn effective_weight(&self, layer: &str) -> Tensor {
        let w = &self.store.get(&format!("{layer}.w")).value;
        if !self.cfg.smoothness {
            return w.clone();
        }
        let sigma = spectral_sigma(&self.store, layer);
        w.map(|v| v / sigma)
    }
}

impl Model for Discriminator {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn kind(&self) -> &'static str {
        "discriminator"
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }
}
