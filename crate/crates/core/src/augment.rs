//! Mask corruption for fake anchors, and discriminator-input augmentation.

use crate::data::{GridImage, LabelMap};
use crate::error::{Error, Result};
use advtta_tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Patch side as a fraction of the shorter image side.
    pub patch_frac: f64,
    pub n_swap_pairs: usize,
    /// Per-pixel probability of reassignment to a uniformly random class.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec { patch_frac: 0.10, n_swap_pairs: 3, noise_rate: 0.05, seed: 0 }
    }
}

impl CorruptionSpec {
    /// No swaps and no noise.
    pub fn identity() -> Self {
        CorruptionSpec { n_swap_pairs: 0, noise_rate: 0.0, ..CorruptionSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.patch_frac > 0.0 && self.patch_frac < 0.5) {
            return Err(Error::Config(format!("patch_frac must lie in (0, 0.5), got {}", self.patch_frac)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate must lie in [0, 1], got {}", self.noise_rate)));
        }
        Ok(())
    }

    fn patch_side(&self, h: usize, w: usize) -> Result<usize> {
        let side = (self.patch_frac * h.min(w) as f64).round() as usize;
        if side < 1 {
            return Err(Error::Config(format!("patch side rounds to zero on a {h}x{w} mask")));
        }
        Ok(side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub max_translate_frac: f64,
    /// Rotation angles are drawn uniformly from this interval (radians).
    pub rotation_range_rad: (f64, f64),
    pub instance_noise_std: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { max_translate_frac: 0.10, rotation_range_rad: (0.0, FRAC_PI_2), instance_noise_std: 0.1, seed: 0 }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec { max_translate_frac: 0.0, rotation_range_rad: (0.0, 0.0), instance_noise_std: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_rad;
        if !(0.0..=1.0).contains(&self.max_translate_frac) || self.instance_noise_std < 0.0 || !(lo <= hi) {
            return Err(Error::Config(format!("invalid augmentation spec {self:?}")));
        }
        Ok(())
    }

    /// Draws one rigid transform for an `h × w` frame.
    pub fn sample_transform<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> RigidTransform {
        let (lo, hi) = self.rotation_range_rad;
        let angle = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let mut shift = |n: usize| {
            let m = self.max_translate_frac * n as f64;
            if m > 0.0 {
                rng.gen_range(-m..=m)
            } else {
                0.0
            }
        };
        let ty = shift(h);
        let tx = shift(w);
        RigidTransform { angle, ty, tx }
    }
}

/// Rotation about the frame centre followed by a translation, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub angle: f64,
    pub ty: f64,
    pub tx: f64,
}

impl RigidTransform {
    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && self.ty == 0.0 && self.tx == 0.0
    }

    /// Source coordinate `(row, col)` that lands on output pixel `(i, j)`.
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (i as f64 - cy - self.ty, j as f64 - cx - self.tx);
        let (s, c) = self.angle.sin_cos();
        // Inverse rotation of the output offset.
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    }
}

/// Nearest-neighbour warp of channel-major `c × h × w` planes. Pixels mapped
/// from outside the frame get `fill` (one value per channel).
fn warp_nearest(src: &[f64], c: usize, h: usize, w: usize, t: &RigidTransform, fill: &[f64]) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = t.source(i, j, h, w);
            let (r, q) = (sy.round(), sx.round());
            let inside = r >= 0.0 && q >= 0.0 && r < h as f64 && q < w as f64;
            for k in 0..c {
                out[k * plane + i * w + j] =
                    if inside { src[k * plane + r as usize * w + q as usize] } else { fill[k] };
            }
        }
    }
    out
}

fn warp_bilinear(src: &[f64], h: usize, w: usize, t: &RigidTransform) -> Vec<f64> {
    let at = |r: i64, q: i64| {
        if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
            0.0
        } else {
            src[r as usize * w + q as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (sy, sx) = t.source(i, j, h, w);
            let (r0, q0) = (sy.floor(), sx.floor());
            let (fr, fq) = (sy - r0, sx - q0);
            let (r0, q0) = (r0 as i64, q0 as i64);
            out[i * w + j] = (1.0 - fr) * ((1.0 - fq) * at(r0, q0) + fq * at(r0, q0 + 1))
                + fr * ((1.0 - fq) * at(r0 + 1, q0) + fq * at(r0 + 1, q0 + 1));
        }
    }
    out
}

fn background_fill(c: usize) -> Vec<f64> {
    let mut f = vec![0.0; c];
    f[0] = 1.0;
    f
}

/// Items that can be rigidly warped.
pub trait RotoTranslate: Sized {
    fn warp(&self, t: &RigidTransform) -> Self;
}

impl RotoTranslate for LabelMap {
    fn warp(&self, t: &RigidTransform) -> LabelMap {
        if t.is_identity() {
            return self.clone();
        }
        let (h, w) = self.hw();
        let c = self.n_classes();
        let out = warp_nearest(self.channels(), c, h, w, t, &background_fill(c));
        LabelMap::new(h, w, out, self.class_names.clone()).expect("nearest warp keeps the simplex")
    }
}

impl RotoTranslate for GridImage {
    fn warp(&self, t: &RigidTransform) -> GridImage {
        if t.is_identity() {
            return self.clone();
        }
        let (h, w) = self.hw();
        self.with_pixels(h, w, warp_bilinear(self.pixels(), h, w, t))
    }
}

/// Random roto-translation: nearest-neighbour for label maps, bilinear for images,
/// background outside the frame.
pub fn roto_translate<T: RotoTranslate, R: Rng>(item: &T, hw: (usize, usize), spec: &AugmentSpec, rng: &mut R) -> T {
    let t = spec.sample_transform(hw.0, hw.1, rng);
    item.warp(&t)
}

/// Applies an independent random roto-translation to every mask in an
/// `[N, C, H, W]` batch (nearest-neighbour, background fill).
pub fn roto_translate_masks<R: Rng>(batch: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Tensor {
    let (n, c, h, w) = batch.dims4();
    let fill = background_fill(c);
    let stride = c * h * w;
    let mut out = Vec::with_capacity(batch.len());
    for b in 0..n {
        let t = spec.sample_transform(h, w, rng);
        let src = &batch.data()[b * stride..(b + 1) * stride];
        if t.is_identity() {
            out.extend_from_slice(src);
        } else {
            out.extend(warp_nearest(src, c, h, w, &t, &fill));
        }
    }
    Tensor::new(batch.shape(), out)
}

/// Adds i.i.d. zero-mean Gaussian noise.
pub fn instance_noise<R: Rng>(t: &Tensor, std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return t.clone();
    }
    let n = Normal::new(0.0, std).expect("std must be non-negative and finite");
    let mut out = t.clone();
    for v in out.data_mut() {
        *v += n.sample(rng);
    }
    out
}

fn swap_patches(idx: &mut [usize], w: usize, a: (usize, usize), b: (usize, usize), side: usize) {
    for dy in 0..side {
        for dx in 0..side {
            idx.swap((a.0 + dy) * w + a.1 + dx, (b.0 + dy) * w + b.1 + dx);
        }
    }
}

fn overlaps(a: (usize, usize), b: (usize, usize), side: usize) -> bool {
    a.0 < b.0 + side && b.0 < a.0 + side && a.1 < b.1 + side && b.1 < a.1 + side
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Stage 1 only: swaps `n_swap_pairs` square patch pairs, a pure permutation of pixels.
pub fn swap_stage<R: Rng>(y: &LabelMap, spec: &CorruptionSpec, rng: &mut R) -> Result<Vec<usize>> {
    let (h, w) = y.hw();
    let side = spec.patch_side(h, w)?;
    let mut idx = y.argmax();
    let mut placed: Vec<(usize, usize)> = Vec::new();
    let draw = |rng: &mut R| (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side));
    for _ in 0..spec.n_swap_pairs {
        let mut pair = (draw(rng), draw(rng));
        for _ in 0..PLACEMENT_ATTEMPTS {
            let clash = overlaps(pair.0, pair.1, side)
                || placed.iter().any(|&p| overlaps(p, pair.0, side) || overlaps(p, pair.1, side));
            if !clash {
                break;
            }
            pair = (draw(rng), draw(rng));
        }
        placed.extend([pair.0, pair.1]);
        swap_patches(&mut idx, w, pair.0, pair.1, side);
    }
    Ok(idx)
}

/// Swap-then-noise corruption of a hard mask.
pub fn corrupt_mask<R: Rng>(y: &LabelMap, spec: &CorruptionSpec, rng: &mut R) -> Result<LabelMap> {
    spec.validate()?;
    if !y.is_hard() {
        return Err(Error::Contract("corrupt_mask expects a hard one-hot mask".into()));
    }
    let mut idx = swap_stage(y, spec, rng)?;
    if spec.noise_rate > 0.0 {
        let c = y.n_classes();
        for v in &mut idx {
            if rng.gen::<f64>() < spec.noise_rate {
                *v = rng.gen_range(0..c);
            }
        }
    }
    let (h, w) = y.hw();
    LabelMap::from_indices(h, w, &idx, y.class_names.clone())
}
