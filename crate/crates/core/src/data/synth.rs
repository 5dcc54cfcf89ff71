//! Synthetic short-axis-like slices: a bright blood pool ("ventricle") inside a
//! dark ring ("myocardium") on a textured background with distractor blobs.

use super::{default_class_names, GridImage, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::rng::Part;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Bumped whenever any generator constant below changes.
pub const GENERATOR_VERSION: u32 = 1;

// All lengths are fractions of S = min(H, W).
const RADIUS: (f64, f64) = (0.09, 0.16);
const THICKNESS: (f64, f64) = (0.045, 0.075);
const CENTER_JITTER: f64 = 0.08;
const ELLIPTICITY: (f64, f64) = (0.0, 0.12);
const APEX_SHRINK: f64 = 0.45;
const SLICES: (usize, usize) = (4, 10);
const BLOOD: (f64, f64) = (0.7, 0.9);
const MYO: (f64, f64) = (0.15, 0.3);
const BACKGROUND: (f64, f64) = (0.35, 0.55);
const TEXTURE_AMP: (f64, f64) = (0.03, 0.08);
const BLOB_AMP: (f64, f64) = (0.2, 0.4);
const BLOB_SIGMA: (f64, f64) = (0.03, 0.06);
const NOISE: (f64, f64) = (0.01, 0.03);
const MIN_SIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub image_hw: (usize, usize),
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing_mm: (f64, f64),
}

fn default_spacing() -> (f64, f64) {
    (1.51, 1.51)
}

impl SynthConfig {
    pub fn new(n_patients: usize, image_hw: (usize, usize), seed: u64) -> Self {
        SynthConfig { n_patients, image_hw, seed, spacing_mm: default_spacing() }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

/// Patient-level anatomy and appearance.
struct Patient {
    radius: f64,
    thickness: f64,
    cy: f64,
    cx: f64,
    ellipticity: f64,
    angle: f64,
    blood: f64,
    myo: f64,
    background: f64,
    tex_amp: f64,
    tex_freq: (f64, f64),
    tex_phase: f64,
    blobs: Vec<Blob>,
    noise: f64,
    n_slices: usize,
}

impl Patient {
    fn draw<R: Rng>(rng: &mut R, h: usize, w: usize) -> Patient {
        let s = h.min(w) as f64;
        let radius = uniform(rng, RADIUS) * s;
        let thickness = uniform(rng, THICKNESS) * s;
        let cy = h as f64 / 2.0 + uniform(rng, (-CENTER_JITTER, CENTER_JITTER)) * s;
        let cx = w as f64 / 2.0 + uniform(rng, (-CENTER_JITTER, CENTER_JITTER)) * s;
        let outer = (RADIUS.1 + THICKNESS.1) * s * (1.0 + ELLIPTICITY.1);
        let n_blobs = rng.gen_range(1..=3);
        let mut blobs = Vec::new();
        for _ in 0..n_blobs {
            // Rejection-sample blob centres away from the heart; give up quietly.
            for _ in 0..50 {
                let by = uniform(rng, (0.1, 0.9)) * h as f64;
                let bx = uniform(rng, (0.1, 0.9)) * w as f64;
                let sigma = uniform(rng, BLOB_SIGMA) * s;
                if ((by - cy).powi(2) + (bx - cx).powi(2)).sqrt() > outer + 3.0 * sigma {
                    blobs.push(Blob { cy: by, cx: bx, sigma, amp: uniform(rng, BLOB_AMP) });
                    break;
                }
            }
        }
        Patient {
            radius,
            thickness,
            cy,
            cx,
            ellipticity: uniform(rng, ELLIPTICITY),
            angle: uniform(rng, (0.0, PI)),
            blood: uniform(rng, BLOOD),
            myo: uniform(rng, MYO),
            background: uniform(rng, BACKGROUND),
            tex_amp: uniform(rng, TEXTURE_AMP),
            tex_freq: (uniform(rng, (1.0, 4.0)) / s, uniform(rng, (1.0, 4.0)) / s),
            tex_phase: uniform(rng, (0.0, 2.0 * PI)),
            blobs,
            noise: uniform(rng, NOISE),
            n_slices: rng.gen_range(SLICES.0..=SLICES.1),
        }
    }

    fn slice<R: Rng>(&self, k: usize, h: usize, w: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
        let scale = 1.0 - APEX_SHRINK * k as f64 / (self.n_slices - 1) as f64;
        let r = self.radius * scale;
        let t = self.thickness;
        let (major, minor) = (1.0 + self.ellipticity, 1.0 - self.ellipticity);
        let (sa, ca) = self.angle.sin_cos();
        let noise = Normal::new(0.0, self.noise).expect("positive noise std");
        let mut px = Vec::with_capacity(h * w);
        let mut idx = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                let (dy, dx) = (y - self.cy, x - self.cx);
                let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                let d = ((u / major).powi(2) + (v / minor).powi(2)).sqrt();
                let class = if d < r {
                    1
                } else if d < r + t {
                    2
                } else {
                    0
                };
                let mut val = match class {
                    1 => self.blood,
                    2 => self.myo,
                    _ => {
                        let phase = 2.0 * PI * (self.tex_freq.0 * y + self.tex_freq.1 * x) + self.tex_phase;
                        let mut b = self.background + self.tex_amp * phase.sin();
                        for blob in &self.blobs {
                            let q = ((y - blob.cy).powi(2) + (x - blob.cx).powi(2)) / (2.0 * blob.sigma.powi(2));
                            b += blob.amp * (-q).exp();
                        }
                        b
                    }
                };
                val += noise.sample(rng);
                px.push(val.clamp(0.0, 1.0));
                idx.push(class);
            }
        }
        (px, idx)
    }
}

/// Generates `n_patients` patients of 4–10 slices each with exact label maps.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    let (h, w) = cfg.image_hw;
    if cfg.n_patients < 5 {
        return Err(Error::Config(format!("need at least 5 patients, got {}", cfg.n_patients)));
    }
    if h.min(w) < MIN_SIDE {
        return Err(Error::Config(format!(
            "image {h}x{w} is too small for the smallest ring; both sides must be at least {MIN_SIDE}"
        )));
    }
    let names = default_class_names();
    let mut out = Vec::new();
    for p in 0..cfg.n_patients {
        let pid = format!("synth_{p:03}");
        let mut rng = crate::rng::rng_from(cfg.seed, &[Part::from("synth"), Part::from(p)]);
        let patient = Patient::draw(&mut rng, h, w);
        for k in 0..patient.n_slices {
            let (px, idx) = patient.slice(k, h, w, &mut rng);
            let image = GridImage::new(h, w, px, cfg.spacing_mm, pid.clone(), k)?;
            let label = LabelMap::from_indices(h, w, &idx, names.clone())?;
            out.push(Sample::new(image, Some(label))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every ventricle pixel's 4-neighbours are ventricle or myocardium, so the
    /// ring separates the disk from the background.
    fn ring_encloses_disk(lbl: &LabelMap) -> bool {
        let (h, w) = lbl.hw();
        let idx = lbl.argmax();
        for i in 0..h {
            for j in 0..w {
                if idx[i * w + j] != 1 {
                    continue;
                }
                if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                    return false;
                }
                for (a, b) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                    if idx[a * w + b] == 0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn samples_are_valid_and_deterministic() {
        let cfg = SynthConfig::new(6, (32, 40), 5);
        let a = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, generate_synthetic_dataset(&cfg).unwrap());
        for pid in 0..6 {
            let n = a.iter().filter(|s| s.image.patient_id == format!("synth_{pid:03}")).count();
            assert!((4..=10).contains(&n));
        }
        for s in &a {
            let l = s.label.as_ref().unwrap();
            assert!(l.is_hard());
            assert!(ring_encloses_disk(l), "{:?}", s.key());
            let hist = l.class_histogram();
            assert!(hist[1] > 0 && hist[2] > 0);
        }
    }

    #[test]
    fn foreground_fraction_stays_in_band() {
        // Enough patients for well over 1000 slices.
        let samples = generate_synthetic_dataset(&SynthConfig::new(150, (48, 48), 17)).unwrap();
        assert!(samples.len() >= 1000);
        for s in &samples[..1000] {
            let hist = s.label.as_ref().unwrap().class_histogram();
            let fg = (hist[1] + hist[2]) as f64 / (48.0 * 48.0);
            assert!((0.01..=0.5).contains(&fg), "foreground fraction {fg}");
        }
    }

    #[test]
    fn rejects_tiny_images_and_cohorts() {
        assert!(matches!(generate_synthetic_dataset(&SynthConfig::new(5, (31, 64), 0)), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic_dataset(&SynthConfig::new(4, (64, 64), 0)), Err(Error::Config(_))));
    }
}
