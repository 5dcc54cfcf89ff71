//! UNet with batch normalisation, bilinear upsampling and skip concatenation.

use super::layers::{add_batch_norm, add_conv, batch_norm, conv, he_std};
use super::{Model, ParamStore, Pass};
use crate::error::{Error, Result};
use advtta_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentorConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub n_classes: usize,
    pub input_hw: (usize, usize),
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        SegmentorConfig { depth: 4, base_filters: 32, n_classes: 3, input_hw: (224, 224) }
    }
}

#[derive(Clone, Debug)]
pub struct Segmentor {
    pub cfg: SegmentorConfig,
    store: ParamStore,
}

fn add_block<R: rand::Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) {
    add_conv(store, &format!("{name}.c1"), cout, cin, 3, false, he_std(cin, 3), rng);
    add_batch_norm(store, &format!("{name}.bn1"), cout);
    add_conv(store, &format!("{name}.c2"), cout, cout, 3, false, he_std(cout, 3), rng);
    add_batch_norm(store, &format!("{name}.bn2"), cout);
}

fn block<'t>(store: &ParamStore, tape: &'t Tape, x: Var<'t>, name: &str, pass: Pass) -> Var<'t> {
    let h = conv(store, tape, x, &format!("{name}.c1"), 1, 1, pass.learn);
    let h = batch_norm(store, tape, h, &format!("{name}.bn1"), pass).relu();
    let h = conv(store, tape, h, &format!("{name}.c2"), 1, 1, pass.learn);
    batch_norm(store, tape, h, &format!("{name}.bn2"), pass).relu()
}

fn check_dims(hw: (usize, usize), depth: usize) -> Result<()> {
    let m = 1usize << depth;
    if hw.0 == 0 || hw.1 == 0 || hw.0 % m != 0 || hw.1 % m != 0 {
        return Err(Error::Shape(format!("input {}x{} is not divisible by 2^{depth} = {m}", hw.0, hw.1)));
    }
    Ok(())
}

/// Builds a UNet whose weights are drawn from `seed`.
pub fn build_segmentor(cfg: &SegmentorConfig, seed: u64) -> Result<Segmentor> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("segmentor needs at least two classes".into()));
    }
    if cfg.depth == 0 || cfg.base_filters == 0 {
        return Err(Error::Config("segmentor depth and base_filters must be positive".into()));
    }
    check_dims(cfg.input_hw, cfg.depth)?;
    let mut rng = crate::seeded!(seed, "segmentor");
    let mut store = ParamStore::new();
    let width = |l: usize| cfg.base_filters << l;
    add_block(&mut store, "enc0", 1, width(0), &mut rng);
    for l in 1..=cfg.depth {
        add_block(&mut store, &format!("enc{l}"), width(l - 1), width(l), &mut rng);
    }
    for l in (0..cfg.depth).rev() {
        add_block(&mut store, &format!("dec{l}"), width(l + 1) + width(l), width(l), &mut rng);
    }
    add_conv(&mut store, "head", cfg.n_classes, width(0), 1, true, he_std(width(0), 1), &mut rng);
    Ok(Segmentor { cfg: cfg.clone(), store })
}

impl Segmentor {
    /// Maps `[N, 1, H, W]` images to `[N, C, H, W]` class probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, pass: Pass) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("segmentor expects [N, 1, H, W], got {s:?}")));
        }
        check_dims((s[2], s[3]), self.cfg.depth)?;
        let st = &self.store;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = block(st, tape, x, "enc0", pass);
        for l in 1..=self.cfg.depth {
            skips.push(h);
            h = block(st, tape, h.maxpool2(), &format!("enc{l}"), pass);
        }
        for l in (0..self.cfg.depth).rev() {
            let up = h.upsample2().concat_channels(skips[l]);
            h = block(st, tape, up, &format!("dec{l}"), pass);
        }
        Ok(conv(st, tape, h, "head", 1, 0, pass.learn).softmax_channels())
    }
}

impl Model for Segmentor {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn kind(&self) -> &'static str {
        "segmentor"
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use advtta_tensor::Tensor;

    fn small() -> SegmentorConfig {
        SegmentorConfig { depth: 2, base_filters: 4, n_classes: 3, input_hw: (16, 16) }
    }

    #[test]
    fn output_is_a_valid_simplex() {
        let seg = build_segmentor(&small(), 1).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 1, 16, 16], 1.0, &mut crate::seeded!(0, "x")));
        for pass in [Pass::TRAIN, Pass::FROZEN] {
            let y = seg.forward(&tape, x, pass).unwrap().value();
            assert_eq!(y.shape(), &[2, 3, 16, 16]);
            for b in 0..2 {
                for p in 0..256 {
                    let s: f64 = (0..3).map(|c| y.data()[(b * 3 + c) * 256 + p]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_segmentor(&small(), 9).unwrap();
        assert_eq!(a.state_hash(), build_segmentor(&small(), 9).unwrap().state_hash());
        assert_ne!(a.state_hash(), build_segmentor(&small(), 10).unwrap().state_hash());
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let cfg = SegmentorConfig { input_hw: (18, 16), ..small() };
        assert!(matches!(build_segmentor(&cfg, 0), Err(Error::Shape(_))));
        let seg = build_segmentor(&small(), 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 18, 16]));
        assert!(matches!(seg.forward(&tape, x, Pass::FROZEN), Err(Error::Shape(_))));
    }

    /// Layer-by-layer count for depth 4, base 32, three classes.
    #[test]
    fn default_parameter_count_matches_hand_count() {
        // conv3x3 without bias + BN (gamma, beta): 9·cin·cout + 2·cout.
        let block = |cin: u64, cout: u64| 9 * cin * cout + 2 * cout + 9 * cout * cout + 2 * cout;
        let enc = block(1, 32) + block(32, 64) + block(64, 128) + block(128, 256) + block(256, 512);
        let dec = block(512 + 256, 256) + block(256 + 128, 128) + block(128 + 64, 64) + block(64 + 32, 32);
        let head = 32 * 3 + 3;
        let hand = enc + dec + head;
        assert_eq!(hand, 7_849_091);
        let cfg = SegmentorConfig { input_hw: (64, 64), ..SegmentorConfig::default() };
        assert_eq!(build_segmentor(&cfg, 0).unwrap().weight_count() as u64, hand);
    }
}
