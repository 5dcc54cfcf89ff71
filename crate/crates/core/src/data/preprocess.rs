//! Spacing normalisation, centred crop/pad, and robust intensity scaling.

use super::{group_by_patient, GridImage, LabelMap, Sample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Target geometry of the preprocessing pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_spacing_mm: (f64, f64),
    pub target_hw: (usize, usize),
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec { target_spacing_mm: (1.51, 1.51), target_hw: (224, 224) }
    }
}

fn check_spacing(s: (f64, f64)) -> Result<()> {
    if !(s.0 > 0.0 && s.1 > 0.0 && s.0.is_finite() && s.1.is_finite()) {
        return Err(Error::Config(format!("spacing must be positive and finite, got {s:?}")));
    }
    Ok(())
}

fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Source coordinate of output index `j` under half-pixel alignment, clamped to the grid.
fn source_coord(j: usize, from: f64, to: f64, n_in: usize) -> f64 {
    let u = (j as f64 + 0.5) * to / from - 0.5;
    u.clamp(0.0, (n_in - 1) as f64)
}

/// Resamples an image to `target` spacing with bilinear interpolation.
pub fn resample_image(img: &GridImage, target: (f64, f64)) -> Result<GridImage> {
    check_spacing(target)?;
    let (h, w) = img.hw();
    let (sr, sc) = img.spacing_mm;
    if (sr, sc) == target {
        return Ok(img.clone());
    }
    let (oh, ow) = (resampled_len(h, sr, target.0), resampled_len(w, sc, target.1));
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let u = source_coord(i, sr, target.0, h);
        let (r0, fr) = (u.floor() as usize, u - u.floor());
        let r1 = (r0 + 1).min(h - 1);
        for j in 0..ow {
            let v = source_coord(j, sc, target.1, w);
            let (c0, fc) = (v.floor() as usize, v - v.floor());
            let c1 = (c0 + 1).min(w - 1);
            let top = img.get(r0, c0) * (1.0 - fc) + img.get(r0, c1) * fc;
            let bot = img.get(r1, c0) * (1.0 - fc) + img.get(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    let mut res = img.with_pixels(oh, ow, out);
    res.spacing_mm = target;
    Ok(res)
}

/// Resamples a label map with nearest-neighbour lookup (halves round up).
pub fn resample_label(lbl: &LabelMap, from: (f64, f64), target: (f64, f64)) -> Result<LabelMap> {
    check_spacing(from)?;
    check_spacing(target)?;
    if from == target {
        return Ok(lbl.clone());
    }
    let (h, w) = lbl.hw();
    let (oh, ow) = (resampled_len(h, from.0, target.0), resampled_len(w, from.1, target.1));
    let nearest = |u: f64, n: usize| ((u + 0.5).floor() as usize).min(n - 1);
    let rows: Vec<usize> = (0..oh).map(|i| nearest(source_coord(i, from.0, target.0, h), h)).collect();
    let cols: Vec<usize> = (0..ow).map(|j| nearest(source_coord(j, from.1, target.1, w), w)).collect();
    let c = lbl.n_classes();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        for &r in &rows {
            for &col in &cols {
                out.push(lbl.prob(k, r, col));
            }
        }
    }
    LabelMap::new(oh, ow, out, lbl.class_names.clone())
}

/// Resamples every slice of a stack (and its labels, if given) to `target` spacing.
pub fn resample_to_spacing(
    volume: &[GridImage],
    labels: Option<&[LabelMap]>,
    target: (f64, f64),
) -> Result<(Vec<GridImage>, Option<Vec<LabelMap>>)> {
    check_spacing(target)?;
    let images = volume.iter().map(|im| resample_image(im, target)).collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        None => None,
        Some(ls) => {
            if ls.len() != volume.len() {
                return Err(Error::Shape(format!("{} labels for {} slices", ls.len(), volume.len())));
            }
            Some(
                ls.iter()
                    .zip(volume)
                    .map(|(l, im)| resample_label(l, im.spacing_mm, target))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok((images, labels))
}

/// Offsets of a centred crop or pad along one axis: `(src_start, dst_start, len)`.
/// With an odd surplus the extra row/column comes off (or goes onto) the bottom/right.
fn axis_window(n_in: usize, n_out: usize) -> (usize, usize, usize) {
    if n_in >= n_out {
        ((n_in - n_out) / 2, 0, n_out)
    } else {
        (0, (n_out - n_in) / 2, n_in)
    }
}

/// Things that can be centre-cropped or padded to a fixed size.
pub trait CropPad: Sized {
    fn crop_or_pad(&self, target_hw: (usize, usize)) -> Self;
}

impl CropPad for GridImage {
    fn crop_or_pad(&self, (th, tw): (usize, usize)) -> GridImage {
        let (h, w) = self.hw();
        let (sr, dr, nr) = axis_window(h, th);
        let (sc, dc, nc) = axis_window(w, tw);
        let mut out = vec![0.0; th * tw];
        for i in 0..nr {
            for j in 0..nc {
                out[(dr + i) * tw + dc + j] = self.get(sr + i, sc + j);
            }
        }
        self.with_pixels(th, tw, out)
    }
}

impl CropPad for LabelMap {
    fn crop_or_pad(&self, (th, tw): (usize, usize)) -> LabelMap {
        let (h, w) = self.hw();
        let (sr, dr, nr) = axis_window(h, th);
        let (sc, dc, nc) = axis_window(w, tw);
        let c = self.n_classes();
        let plane = th * tw;
        let mut out = vec![0.0; c * plane];
        out[..plane].fill(1.0);
        for k in 0..c {
            for i in 0..nr {
                for j in 0..nc {
                    out[k * plane + (dr + i) * tw + dc + j] = self.prob(k, sr + i, sc + j);
                }
            }
        }
        LabelMap::new(th, tw, out, self.class_names.clone()).expect("crop/pad keeps the simplex")
    }
}

/// Centre crop and/or pad to exactly `target_hw`. Padding is zero for images and
/// background for label maps.
pub fn crop_or_pad<T: CropPad>(item: &T, target_hw: (usize, usize)) -> Result<T> {
    if target_hw.0 == 0 || target_hw.1 == 0 {
        return Err(Error::Config(format!("crop target must be positive, got {target_hw:?}")));
    }
    Ok(item.crop_or_pad(target_hw))
}

/// Linear-interpolation quantile between order statistics of sorted data
/// (position `q·(n−1)`).
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const IQR_FLOOR: f64 = 1e-8;

/// Result of normalising one patient's stack.
#[derive(Clone, Debug)]
pub struct NormalizeOutcome {
    pub images: Vec<GridImage>,
    pub median: f64,
    pub iqr: f64,
    /// Set when the IQR was degenerate and a divisor of 1 was used instead.
    pub warning: Option<String>,
}

/// `(x − median) / IQR` with statistics pooled over all pixels of the stack.
pub fn normalize_median_iqr(images: &[GridImage]) -> Result<NormalizeOutcome> {
    if images.is_empty() {
        return Err(Error::Contract("normalisation needs at least one image".into()));
    }
    let mut all: Vec<f64> = images.iter().flat_map(|im| im.pixels().iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    let median = quantile_linear(&all, 0.5);
    let iqr = quantile_linear(&all, 0.75) - quantile_linear(&all, 0.25);
    let (divisor, warning) = if iqr < IQR_FLOOR {
        let pid = &images[0].patient_id;
        let msg = format!("patient {pid}: IQR {iqr:e} below {IQR_FLOOR:e}, using divisor 1");
        log::warn!("{msg}");
        (1.0, Some(msg))
    } else {
        (iqr, None)
    };
    let images = images
        .iter()
        .map(|im| {
            let px = im.pixels().iter().map(|v| (v - median) / divisor).collect();
            im.with_pixels(im.height(), im.width(), px)
        })
        .collect();
    Ok(NormalizeOutcome { images, median, iqr, warning })
}

/// Full pipeline per patient: resample to the target spacing, centre
/// crop/pad, then median/IQR normalisation pooled over the patient's stack.
/// Returns the samples in input order plus any degenerate-IQR warnings.
pub fn preprocess_samples(samples: &[Sample], spec: &PreprocessSpec) -> Result<(Vec<Sample>, Vec<String>)> {
    let mut out: Vec<Option<Sample>> = vec![None; samples.len()];
    let mut warnings = Vec::new();
    for (_, idx) in group_by_patient(samples) {
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &samples[i];
            let (im, lb) = resample_to_spacing(
                std::slice::from_ref(&s.image),
                s.label.as_ref().map(std::slice::from_ref),
                spec.target_spacing_mm,
            )?;
            images.push(crop_or_pad(&im[0], spec.target_hw)?);
            labels.push(match lb {
                Some(l) => Some(crop_or_pad(&l[0], spec.target_hw)?),
                None => None,
            });
        }
        let norm = normalize_median_iqr(&images)?;
        warnings.extend(norm.warning);
        for ((&i, im), lb) in idx.iter().zip(norm.images).zip(labels) {
            out[i] = Some(Sample::new(im, lb)?);
        }
    }
    Ok((out.into_iter().map(|s| s.expect("every sample belongs to a patient")).collect(), warnings))
}
