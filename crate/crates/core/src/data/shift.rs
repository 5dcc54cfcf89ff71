//! Synthetic acquisition shift: gamma, smooth bias field, blur, noise.

use super::GridImage;
use crate::error::{Error, Result};
use crate::rng::Part;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub gamma: f64,
    pub bias_field_amplitude: f64,
    pub noise_std: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { gamma: 1.0, bias_field_amplitude: 0.0, noise_std: 0.0, blur_sigma: 0.0, seed: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0 && self.bias_field_amplitude == 0.0 && self.noise_std == 0.0 && self.blur_sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma.is_finite()
            && self.bias_field_amplitude >= 0.0
            && self.noise_std >= 0.0
            && self.blur_sigma >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid shift spec {self:?}")));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(px: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] =
                k.iter().enumerate().map(|(t, kv)| kv * px[i * w + clamp(j as i64 + t as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] =
                k.iter().enumerate().map(|(t, kv)| kv * tmp[clamp(i as i64 + t as i64 - r, h) * w + j]).sum();
        }
    }
    out
}

/// Applies gamma → bias field → blur → noise. Randomness is keyed on the spec
/// seed and the slice identity only, so the result is order-independent.
pub fn apply_domain_shift(image: &GridImage, spec: &ShiftSpec) -> Result<GridImage> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(image.clone());
    }
    let (h, w) = image.hw();
    let mut rng = crate::rng::rng_from(
        spec.seed,
        &[Part::from("shift"), Part::from(&image.patient_id), Part::from(image.slice_index)],
    );
    let mut px: Vec<f64> = image.pixels().to_vec();
    if spec.gamma != 1.0 {
        for v in &mut px {
            *v = v.signum() * v.abs().powf(spec.gamma);
        }
    }
    if spec.bias_field_amplitude > 0.0 {
        let (p1, p2): (f64, f64) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
        for i in 0..h {
            for j in 0..w {
                let f = 1.0
                    + spec.bias_field_amplitude
                        * (PI * i as f64 / h as f64 + p1).sin()
                        * (PI * j as f64 / w as f64 + p2).cos();
                px[i * w + j] *= f;
            }
        }
    }
    if spec.blur_sigma > 0.0 {
        px = blur(&px, h, w, spec.blur_sigma);
    }
    if spec.noise_std > 0.0 {
        let n = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut px {
            *v += n.sample(&mut rng);
        }
    }
    Ok(image.with_pixels(h, w, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, v: f64) -> GridImage {
        GridImage::new(h, w, vec![v; h * w], (1.0, 1.0), "p", 2).unwrap()
    }

    #[test]
    fn identity_spec_is_bit_identical() {
        let im = GridImage::new(2, 2, vec![0.1, -0.3, 0.7, 1.9], (1.0, 1.0), "p", 0).unwrap();
        assert_eq!(apply_domain_shift(&im, &ShiftSpec::identity()).unwrap(), im);
    }

    #[test]
    fn gamma_squares_constant_image() {
        let spec = ShiftSpec { gamma: 2.0, ..ShiftSpec::identity() };
        let out = apply_domain_shift(&constant(3, 3, 0.6), &spec).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.36).abs() < 1e-15));
    }

    #[test]
    fn blur_preserves_constants() {
        let spec = ShiftSpec { blur_sigma: 1.3, ..ShiftSpec::identity() };
        let out = apply_domain_shift(&constant(5, 7, 0.4), &spec).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn noise_has_requested_std() {
        let spec = ShiftSpec { noise_std: 0.1, seed: 3, ..ShiftSpec::identity() };
        let im = constant(1000, 1000, 0.5);
        let out = apply_domain_shift(&im, &spec).unwrap();
        let n = out.pixels().len() as f64;
        let res: Vec<f64> = out.pixels().iter().map(|v| v - 0.5).collect();
        let mean = res.iter().sum::<f64>() / n;
        let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.099..=0.101).contains(&std), "std {std}");
    }

    #[test]
    fn shift_is_seeded_per_slice() {
        let spec = ShiftSpec { noise_std: 0.05, bias_field_amplitude: 0.2, seed: 1, ..ShiftSpec::identity() };
        let a = constant(8, 8, 0.5);
        assert_eq!(apply_domain_shift(&a, &spec).unwrap(), apply_domain_shift(&a, &spec).unwrap());
        let mut b = a.clone();
        b.slice_index = 3;
        assert_ne!(apply_domain_shift(&a, &spec).unwrap(), apply_domain_shift(&b, &spec).unwrap());
    }

    #[test]
    fn invalid_gamma_rejected() {
        let spec = ShiftSpec { gamma: 0.0, ..ShiftSpec::identity() };
        assert!(apply_domain_shift(&constant(2, 2, 0.5), &spec).is_err());
    }
}
