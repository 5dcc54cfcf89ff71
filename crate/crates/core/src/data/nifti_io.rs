//! NIfTI ingestion. Volumes are sliced along the third (through-plane) axis;
//! label volumes share the image file name with a `_gt` suffix.

use super::{GridImage, LabelMap};
use crate::error::{Error, Result};
use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use std::path::{Path, PathBuf};

fn strip_nifti_ext(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// Pairs every image volume in `dir` with its `_gt` label volume, if present.
/// The patient id is the file stem. Results are sorted by patient id.
pub fn scan_nifti_dir(dir: &Path) -> Result<Vec<(String, PathBuf, Option<PathBuf>)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = strip_nifti_ext(&name) {
            files.push((stem.to_string(), entry.path()));
        }
    }
    let mut out = Vec::new();
    for (stem, path) in &files {
        if stem.ends_with("_gt") {
            continue;
        }
        let gt = format!("{stem}_gt");
        let label = files.iter().find(|(s, _)| *s == gt).map(|(_, p)| p.clone());
        out.push((stem.clone(), path.clone(), label));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn read_volume(path: &Path) -> Result<(Array3<f64>, (f64, f64))> {
    let fmt = |e: nifti::NiftiError| Error::format(path, e.to_string());
    let obj = ReaderOptions::new().read_file(path).map_err(fmt)?;
    let hdr = obj.header();
    let spacing = (f64::from(hdr.pixdim[1]), f64::from(hdr.pixdim[2]));
    let arr = obj.into_volume().into_ndarray::<f64>().map_err(fmt)?;
    let arr = match arr.ndim() {
        2 => arr.insert_axis(ndarray::Axis(2)),
        3 => arr,
        4 if arr.shape()[3] == 1 => arr.index_axis_move(ndarray::Axis(3), 0),
        n => return Err(Error::format(path, format!("expected a 2D or 3D volume, got rank {n}"))),
    };
    let arr = arr.into_dimensionality::<Ix3>().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((arr, spacing))
}

/// Reads an intensity volume as one [`GridImage`] per slice.
pub fn load_nifti_slices(path: &Path, patient_id: &str) -> Result<Vec<GridImage>> {
    let (arr, spacing) = read_volume(path)?;
    let (h, w, d) = arr.dim();
    (0..d)
        .map(|k| {
            let px: Vec<f64> = arr.index_axis(ndarray::Axis(2), k).iter().copied().collect();
            GridImage::new(h, w, px, spacing, patient_id, k).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

/// Reads an integer label volume as hard one-hot maps.
pub fn load_nifti_labels(path: &Path, class_names: &[String]) -> Result<Vec<LabelMap>> {
    let (arr, _) = read_volume(path)?;
    let (h, w, d) = arr.dim();
    (0..d)
        .map(|k| {
            let plane = arr.index_axis(ndarray::Axis(2), k);
            let mut idx = Vec::with_capacity(h * w);
            for &v in plane.iter() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::format(path, format!("label value {v} is not a class index")));
                }
                idx.push(v as usize);
            }
            LabelMap::from_indices(h, w, &idx, class_names.to_vec()).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

/// Writes `slices` (each `h × w`, row-major) as a 3D volume with the given
/// in-plane spacing. Used to build fixtures and export results.
pub fn write_nifti_volume(path: &Path, h: usize, w: usize, slices: &[Vec<f64>], spacing_mm: (f64, f64)) -> Result<()> {
    let d = slices.len();
    let mut arr = Array3::<f64>::zeros((h, w, d));
    for (k, s) in slices.iter().enumerate() {
        if s.len() != h * w {
            return Err(Error::Shape(format!("slice {k} has {} values, expected {}", s.len(), h * w)));
        }
        for i in 0..h {
            for j in 0..w {
                arr[[i, j, k]] = s[i * w + j];
            }
        }
    }
    let mut hdr = NiftiHeader::default();
    hdr.pixdim = [1.0, spacing_mm.0 as f32, spacing_mm.1 as f32, 1.0, 1.0, 1.0, 1.0, 1.0];
    WriterOptions::new(path)
        .reference_header(&hdr)
        .write_nifti(&arr)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_class_names;

    #[test]
    fn volume_round_trip_through_gz() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<Vec<f64>> = (0..3).map(|k| (0..12).map(|p| (p * 10 + k) as f64).collect()).collect();
        let lbl: Vec<Vec<f64>> = (0..3).map(|k| (0..12).map(|p| ((p + k) % 3) as f64).collect()).collect();
        write_nifti_volume(&dir.path().join("pat01.nii.gz"), 3, 4, &img, (1.25, 1.5)).unwrap();
        write_nifti_volume(&dir.path().join("pat01_gt.nii.gz"), 3, 4, &lbl, (1.25, 1.5)).unwrap();
        write_nifti_volume(&dir.path().join("pat02.nii"), 3, 4, &img, (1.0, 1.0)).unwrap();

        let found = scan_nifti_dir(dir.path()).unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[0].0, "pat01");
        assert!(found[0].2.is_some() && found[1].2.is_none());

        let slices = load_nifti_slices(&found[0].1, "pat01").unwrap();
        assert_eq!(slices.len(), 3);
        assert_eq!(slices[1].hw(), (3, 4));
        assert_eq!(slices[1].pixels(), img[1].as_slice());
        assert!((slices[0].spacing_mm.0 - 1.25).abs() < 1e-6 && (slices[0].spacing_mm.1 - 1.5).abs() < 1e-6);

        let labels = load_nifti_labels(found[0].2.as_ref().unwrap(), &default_class_names()).unwrap();
        let want: Vec<usize> = lbl[2].iter().map(|&v| v as usize).collect();
        assert_eq!(labels[2].argmax(), want);
    }
}
