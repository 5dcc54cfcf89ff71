//! Residual input adaptor tuned per test image.
//!
//! `w(x) = x + conv3(f(conv2(f(conv1(x)))))` with `f(t) = exp(−t²/(σ² + ε))`
//! and one shared trainable `σ`. The last convolution starts at zero, so a
//! fresh adaptor is exactly the identity.

use super::layers::{add_conv, conv, he_std};
use super::{Model, ParamStore, Pass};
use crate::error::{Error, Result};
use advtta_tensor::{Param, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptorConfig {
    pub n_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub sigma_init: f64,
    pub eps: f64,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        AdaptorConfig { n_layers: 3, filters: 16, kernel: 3, sigma_init: 0.0, eps: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct Adaptor {
    pub cfg: AdaptorConfig,
    store: ParamStore,
}

pub fn build_adaptor(cfg: &AdaptorConfig, seed: u64) -> Result<Adaptor> {
    if cfg.n_layers < 2 || cfg.filters == 0 || cfg.kernel % 2 == 0 || cfg.eps <= 0.0 {
        return Err(Error::Config(format!("invalid adaptor config {cfg:?}")));
    }
    let mut rng = crate::seeded!(seed, "adaptor");
    let mut store = ParamStore::new();
    let k = cfg.kernel;
    let mut cin = 1;
    for i in 0..cfg.n_layers - 1 {
        add_conv(&mut store, &format!("conv{i}"), cfg.filters, cin, k, true, he_std(cin, k), &mut rng);
        cin = cfg.filters;
    }
    let last = format!("conv{}", cfg.n_layers - 1);
    store.push(Param::weight(format!("{last}.w"), Tensor::zeros(&[1, cin, k, k])));
    store.push(Param::weight(format!("{last}.b"), Tensor::zeros(&[1])));
    store.push(Param::weight("sigma", Tensor::scalar(cfg.sigma_init)));
    Ok(Adaptor { cfg: cfg.clone(), store })
}

impl Adaptor {
    /// Same shape in and out: `[N, 1, H, W]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, pass: Pass) -> Var<'t> {
        let st = &self.store;
        let sigma = st.bind(tape, "sigma", pass.learn);
        let pad = self.cfg.kernel / 2;
        let mut h = x;
        for i in 0..self.cfg.n_layers - 1 {
            h = conv(st, tape, h, &format!("conv{i}"), 1, pad, pass.learn).gauss(sigma, self.cfg.eps);
        }
        let delta = conv(st, tape, h, &format!("conv{}", self.cfg.n_layers - 1), 1, pad, pass.learn);
        x.add(delta)
    }

    pub fn sigma(&self) -> f64 {
        self.store.get("sigma").value.item()
    }
}

impl Model for Adaptor {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn kind(&self) -> &'static str {
        "adaptor"
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }
}
