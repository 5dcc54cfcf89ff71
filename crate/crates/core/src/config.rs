//! Experiment configuration: TOML files layered over a named preset, then
//! `key.path=value` overrides. Unknown keys are rejected at every level.
//!
//! All randomness is derived from the single top-level `seed`; the sections
//! below carry no seeds of their own.

use crate::data::{PreprocessSpec, ShiftSpec, SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::training::{DaeTrainConfig, TrainConfig};
use crate::ttt::TTTConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_patients: usize,
    pub image_hw: (usize, usize),
    pub spacing_mm: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub annotated_train_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub gamma: f64,
    pub bias_field_amplitude: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
}

impl ShiftSection {
    pub fn identity() -> Self {
        let s = ShiftSpec::identity();
        ShiftSection { gamma: s.gamma, bias_field_amplitude: s.bias_field_amplitude, noise_std: s.noise_std, blur_sigma: s.blur_sigma }
    }

    /// Parses `gamma=1.5,blur=1,noise=0.05,bias=0.2`; `none` is the identity.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = ShiftSection::identity();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(out);
        }
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("shift term {part:?} is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Config(format!("shift value {v:?} is not a number")))?;
            match k.trim() {
                "gamma" => out.gamma = v,
                "blur" | "blur_sigma" => out.blur_sigma = v,
                "noise" | "noise_std" => out.noise_std = v,
                "bias" | "bias_field_amplitude" => out.bias_field_amplitude = v,
                other => return Err(Error::Config(format!("unknown shift key {other:?}"))),
            }
        }
        out.spec(0).validate()?;
        Ok(out)
    }

    pub fn spec(&self, seed: u64) -> ShiftSpec {
        ShiftSpec {
            gamma: self.gamma,
            bias_field_amplitude: self.bias_field_amplitude,
            noise_std: self.noise_std,
            blur_sigma: self.blur_sigma,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate only the first N test slices (in dataset order); all when absent.
    #[serde(default)]
    pub max_test_instances: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Also train the denoising autoencoder prior during `train`.
    pub train_dae: bool,
    pub synth: SynthSection,
    pub preprocess: PreprocessSpec,
    pub split: SplitSection,
    pub train: TrainConfig,
    pub dae: DaeTrainConfig,
    pub ttt: TTTConfig,
    /// Test-time acquisition shift used by `ttt-eval` unless overridden.
    pub shift: ShiftSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published hyperparameters on a 224×224 synthetic cohort.
    Full,
    /// Small widths and a short schedule for a single CPU core at 64×64.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or desk)"))),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Preset::Full)
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let split = SplitSpec::default();
        let base = ExperimentConfig {
            seed: 0,
            train_dae: true,
            synth: SynthSection { n_patients: 100, image_hw: (224, 224), spacing_mm: (1.51, 1.51) },
            preprocess: PreprocessSpec::default(),
            split: SplitSection {
                train_frac: split.train_frac,
                val_frac: split.val_frac,
                test_frac: split.test_frac,
                annotated_train_frac: split.annotated_train_frac,
            },
            train: TrainConfig::default(),
            dae: DaeTrainConfig::default(),
            ttt: TTTConfig::default(),
            shift: ShiftSection { gamma: 1.5, bias_field_amplitude: 0.0, noise_std: 0.05, blur_sigma: 1.0 },
            eval: EvalSection { max_test_instances: None },
        };
        match p {
            Preset::Full => base,
            Preset::Desk => desk(base),
        }
    }

    /// Preset, then the file at `path` (if any), then `overrides`.
    pub fn load(preset: Preset, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(ExperimentConfig::preset(preset))
            .map_err(|e| Error::Config(format!("preset does not serialise: {e}")))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, file);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config does not serialise: {e}")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises to JSON")
    }

    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        self.train.validate()?;
        self.ttt.validate()?;
        self.shift.spec(self.seed).validate()?;
        if self.synth.n_patients < 5 {
            return Err(Error::Config(format!("synth.n_patients must be at least 5, got {}", self.synth.n_patients)));
        }
        if self.eval.max_test_instances == Some(0) {
            return Err(Error::Config("eval.max_test_instances must be at least 1".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.synth.n_patients,
            image_hw: self.synth.image_hw,
            seed: self.seed,
            spacing_mm: self.synth.spacing_mm,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.split.train_frac,
            val_frac: self.split.val_frac,
            test_frac: self.split.test_frac,
            annotated_train_frac: self.split.annotated_train_frac,
            seed: self.seed,
        }
    }

    pub fn hash(&self) -> String {
        crate::models::json_hash(&self.to_json())
    }
}

fn desk(mut c: ExperimentConfig) -> ExperimentConfig {
    c.synth = SynthSection { n_patients: 20, image_hw: (64, 64), spacing_mm: (1.51, 1.51) };
    c.preprocess = PreprocessSpec { target_spacing_mm: (1.51, 1.51), target_hw: (64, 64) };
    c.train.unet_base_filters = 8;
    c.train.disc_filters = vec![8, 16, 32, 64, 128];
    c.train.lr = 1e-3;
    // Alternating Adam steps let the adversarial update dominate at this
    // width; larger weights erode validation Dice after ~10 epochs.
    c.train.adversarial_weight = 3e-4;
    c.train.max_epochs = 40;
    c.train.early_stop_patience = 20;
    c.dae.filters = vec![8, 16, 32, 64, 128];
    c.dae.lr = 1e-3;
    c.dae.max_epochs = 100;
    c.eval.max_test_instances = Some(24);
    c
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`, parsing `value` as a TOML literal and falling back
/// to a bare string.
pub fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = value;
    for (i, k) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {} is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(k.to_string(), parsed);
            return Ok(());
        }
        cur = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config(format!("empty override key in {spec:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in [Preset::Full, Preset::Desk] {
            let c = ExperimentConfig::preset(p);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
        }
        let full = ExperimentConfig::preset(Preset::Full);
        assert_eq!(full.train.lr, 1e-4);
        assert_eq!(full.train.batch_size, 12);
        assert_eq!(full.ttt.n_iter, 50);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(ExperimentConfig::load(Preset::Desk, Some(&p), &[]), Err(Error::Config(_))));
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(ExperimentConfig::load(Preset::Desk, Some(&p), &[]), Err(Error::Config(_))));
        assert!(ExperimentConfig::load(Preset::Desk, None, &["train.nope=3".into()]).is_err());
    }

    #[test]
    fn file_then_overrides_layer_on_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 4\n[train]\nmax_epochs = 3\n").unwrap();
        let c = ExperimentConfig::load(Preset::Desk, Some(&p), &["train.max_epochs=2".into(), "ttt.driver=\"dae\"".into()])
            .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.max_epochs, 2);
        assert_eq!(c.train.unet_base_filters, 8);
        assert_eq!(c.ttt.driver, crate::ttt::Driver::Dae);
        assert_eq!(c.split_spec().seed, 4);
        assert_eq!(c.synth_config().seed, 4);
        let bad = ExperimentConfig::load(Preset::Desk, None, &["train.lr=-1".into()]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn shift_strings() {
        let s = ShiftSection::parse("gamma=1.5,blur=1.0,noise=0.05").unwrap();
        assert_eq!((s.gamma, s.blur_sigma, s.noise_std, s.bias_field_amplitude), (1.5, 1.0, 0.05, 0.0));
        assert!(ShiftSection::parse("none").unwrap().spec(0).is_identity());
        assert!(ShiftSection::parse("gamma=-1").is_err());
        assert!(ShiftSection::parse("warp=2").is_err());
    }
}
