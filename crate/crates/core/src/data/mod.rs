//! Images, label maps, and everything that turns raw slices into training
//! batches: synthesis, ingestion, preprocessing, shifts, and splits.

mod nifti_io;
mod preprocess;
mod shift;
mod split;
mod store;
mod synth;

pub use nifti_io::{load_nifti_labels, load_nifti_slices, scan_nifti_dir, write_nifti_volume};
pub use preprocess::{
    crop_or_pad, normalize_median_iqr, preprocess_samples, quantile_linear, resample_image, resample_label,
    resample_to_spacing, CropPad, NormalizeOutcome, PreprocessSpec,
};
pub use shift::{apply_domain_shift, ShiftSpec};
pub use split::{assign_splits, split_by_patient, Split, SplitSets, SplitSpec};
pub use store::{dataset_hash, load_dataset, save_dataset, DatasetIndex, DatasetKind, IndexEntry, StoredSample};
pub use synth::{generate_synthetic_dataset, SynthConfig, GENERATOR_VERSION};

use crate::error::{Error, Result};
use advtta_tensor::Tensor;

/// A 2D scalar-intensity image with physical pixel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    /// `(row, col)` spacing in millimetres.
    pub spacing_mm: (f64, f64),
    pub patient_id: String,
    pub slice_index: usize,
}

impl GridImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        spacing_mm: (f64, f64),
        patient_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0) {
            return Err(Error::Config(format!("pixel spacing must be positive, got {spacing_mm:?}")));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite intensity {bad}")));
        }
        Ok(GridImage { height, width, pixels, spacing_mm, patient_id: patient_id.into(), slice_index })
    }

    /// Same metadata, new pixels of possibly different size. Pixels must be finite.
    pub(crate) fn with_pixels(&self, height: usize, width: usize, pixels: Vec<f64>) -> GridImage {
        debug_assert_eq!(pixels.len(), height * width);
        GridImage { height, width, pixels, ..self.clone() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone())
    }
}

/// Per-pixel class probabilities stored channel-major as `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    channels: Vec<f64>,
    pub class_names: Vec<String>,
}

const SIMPLEX_TOL: f64 = 1e-6;

impl LabelMap {
    /// Builds a map from channel-major probabilities, checking the simplex invariant.
    pub fn new(height: usize, width: usize, channels: Vec<f64>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c < 2 {
            return Err(Error::Config("a label map needs at least two classes".into()));
        }
        if height == 0 || width == 0 || channels.len() != c * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {c}x{height}x{width} label map",
                channels.len()
            )));
        }
        let map = LabelMap { height, width, channels, class_names };
        map.check_simplex()?;
        Ok(map)
    }

    /// Hard one-hot map from per-pixel class indices.
    pub fn from_indices(height: usize, width: usize, indices: &[usize], class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if indices.len() != height * width {
            return Err(Error::Shape(format!("{} indices for {height}x{width}", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!("class index {bad} out of range for {c} classes")));
        }
        let hw = height * width;
        let mut channels = vec![0.0; c * hw];
        for (p, &k) in indices.iter().enumerate() {
            channels[k * hw + p] = 1.0;
        }
        LabelMap::new(height, width, channels, class_names)
    }

    /// Wraps a `[1, C, H, W]` (or `[C, H, W]`) tensor of probabilities.
    pub fn from_tensor(t: &Tensor, class_names: Vec<String>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        LabelMap::new(h, w, t.data().to_vec(), class_names)
    }

    fn check_simplex(&self) -> Result<()> {
        let hw = self.height * self.width;
        for p in 0..hw {
            let mut sum = 0.0;
            for k in 0..self.n_classes() {
                let v = self.channels[k * hw + p];
                if !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v) {
                    return Err(Error::Contract(format!("label probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Contract(format!("pixel {p} channel sum {sum} != 1")));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> &[f64] {
        &self.channels
    }

    pub fn prob(&self, class: usize, row: usize, col: usize) -> f64 {
        self.channels[(class * self.height + row) * self.width + col]
    }

    /// True when every entry is exactly 0 or 1.
    pub fn is_hard(&self) -> bool {
        self.channels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.n_classes() {
                    if self.channels[k * hw + p] > self.channels[best * hw + p] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Hard one-hot version of this map.
    pub fn harden(&self) -> LabelMap {
        let idx = self.argmax();
        LabelMap::from_indices(self.height, self.width, &idx, self.class_names.clone())
            .expect("argmax indices are in range")
    }

    /// Pixel count per class of a hard map.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes()];
        for k in self.argmax() {
            hist[k] += 1;
        }
        hist
    }

    /// Boolean mask of pixels whose argmax is `class`.
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        self.argmax().into_iter().map(|k| k == class).collect()
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.n_classes(), self.height, self.width], self.channels.clone())
    }
}

/// One slice with an optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GridImage,
    pub label: Option<LabelMap>,
}

impl Sample {
    pub fn new(image: GridImage, label: Option<LabelMap>) -> Result<Self> {
        if let Some(l) = &label {
            if l.hw() != image.hw() {
                return Err(Error::Shape(format!(
                    "label {:?} does not match image {:?}",
                    l.hw(),
                    image.hw()
                )));
            }
        }
        Ok(Sample { image, label })
    }

    /// Whether a ground-truth label is attached.
    pub fn annotated(&self) -> bool {
        self.label.is_some()
    }

    pub fn key(&self) -> (String, usize) {
        (self.image.patient_id.clone(), self.image.slice_index)
    }

    /// Drops the annotation.
    pub fn unlabeled(mut self) -> Sample {
        self.label = None;
        self
    }
}

/// Class names used by the synthetic cardiac-like generator.
pub fn default_class_names() -> Vec<String> {
    ["background", "ventricle", "myocardium"].iter().map(|s| s.to_string()).collect()
}

/// Groups samples by patient, keeping the first-seen order of patients and
/// sorting slices within each patient.
pub fn group_by_patient(samples: &[Sample]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match groups.iter_mut().find(|(p, _)| *p == s.image.patient_id) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((s.image.patient_id.clone(), vec![i])),
        }
    }
    for (_, idx) in &mut groups {
        idx.sort_by_key(|&i| samples[i].image.slice_index);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_rejects_broken_simplex() {
        let names = default_class_names();
        assert!(LabelMap::new(1, 1, vec![0.5, 0.5, 0.1], names.clone()).is_err());
        assert!(LabelMap::new(1, 1, vec![0.2, 0.3, 0.5], names).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let names = vec!["bg".to_string(), "fg".to_string()];
        let m = LabelMap::new(1, 2, vec![0.5, 0.2, 0.5, 0.8], names).unwrap();
        assert_eq!(m.argmax(), vec![0, 1]);
        assert!(m.harden().is_hard());
    }

    #[test]
    fn image_rejects_non_positive_spacing_and_nan() {
        assert!(matches!(GridImage::new(1, 1, vec![0.0], (0.0, 1.0), "p", 0), Err(Error::Config(_))));
        assert!(GridImage::new(1, 1, vec![f64::NAN], (1.0, 1.0), "p", 0).is_err());
        assert!(GridImage::new(0, 1, vec![], (1.0, 1.0), "p", 0).is_err());
    }

    #[test]
    fn sample_label_must_match_image() {
        let img = GridImage::new(2, 2, vec![0.0; 4], (1.0, 1.0), "p", 0).unwrap();
        let lbl = LabelMap::from_indices(1, 2, &[0, 1], vec!["a".into(), "b".into()]).unwrap();
        assert!(Sample::new(img, Some(lbl)).is_err());
    }
}
