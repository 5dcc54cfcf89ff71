//! On-disk dataset layout: `index.json` plus one raw little-endian array per
//! slice under `slices/` (`*.img.f64` intensities, `*.lbl.u8` class indices).

use super::{GridImage, LabelMap, Sample, Split};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const INDEX: &str = "index.json";
const SLICES: &str = "slices";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Raw,
    Preprocessed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub patient_id: String,
    pub slice_index: usize,
    pub spacing_mm: (f64, f64),
    pub shape: (usize, usize),
    pub split: Option<Split>,
    pub annotated: bool,
    pub image_file: String,
    pub label_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub class_names: Vec<String>,
    /// Free-form provenance, e.g. generator settings or preprocessing spec.
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub entries: Vec<IndexEntry>,
}

/// A sample together with its persisted split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample {
    pub sample: Sample,
    pub split: Option<Split>,
    /// True when the patient belongs to the annotated part of the training split.
    pub annotated: bool,
}

fn file_stem(pid: &str, slice: usize) -> String {
    let safe: String = pid.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{safe}_{slice:04}")
}

/// Writes the dataset to `dir`, replacing any previous index there.
pub fn save_dataset(
    dir: &Path,
    kind: DatasetKind,
    provenance: serde_json::Value,
    samples: &[StoredSample],
) -> Result<DatasetIndex> {
    let slice_dir = dir.join(SLICES);
    fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
    let class_names = samples
        .iter()
        .find_map(|s| s.sample.label.as_ref().map(|l| l.class_names.clone()))
        .unwrap_or_else(super::default_class_names);
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let img = &s.sample.image;
        let stem = file_stem(&img.patient_id, img.slice_index);
        let image_file = format!("{SLICES}/{stem}.img.f64");
        let bytes: Vec<u8> = img.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(&image_file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let label_file = match &s.sample.label {
            Some(l) => {
                if l.class_names != class_names {
                    return Err(Error::Contract("samples disagree on class names".into()));
                }
                let f = format!("{SLICES}/{stem}.lbl.u8");
                let idx: Vec<u8> = l.argmax().into_iter().map(|k| k as u8).collect();
                let p = dir.join(&f);
                fs::write(&p, idx).map_err(|e| Error::io(&p, e))?;
                Some(f)
            }
            None => None,
        };
        entries.push(IndexEntry {
            patient_id: img.patient_id.clone(),
            slice_index: img.slice_index,
            spacing_mm: img.spacing_mm,
            shape: img.hw(),
            split: s.split,
            annotated: s.annotated,
            image_file,
            label_file,
        });
    }
    let index = DatasetIndex { format_version: FORMAT_VERSION, kind, class_names, provenance, entries };
    let p = dir.join(INDEX);
    fs::write(&p, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let p = dir.join(INDEX);
    let raw = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let index: DatasetIndex = serde_json::from_slice(&raw).map_err(|e| Error::format(&p, e.to_string()))?;
    if index.format_version != FORMAT_VERSION {
        return Err(Error::format(&p, format!("unsupported format version {}", index.format_version)));
    }
    Ok(index)
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<StoredSample>)> {
    let index = read_index(dir)?;
    let mut out = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let (h, w) = e.shape;
        let p = dir.join(&e.image_file);
        let raw = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if raw.len() != h * w * 8 {
            return Err(Error::format(&p, format!("{} bytes for a {h}x{w} f64 image", raw.len())));
        }
        let px = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let image = GridImage::new(h, w, px, e.spacing_mm, e.patient_id.clone(), e.slice_index)?;
        let label = match &e.label_file {
            Some(f) => {
                let p = dir.join(f);
                let raw = fs::read(&p).map_err(|err| Error::io(&p, err))?;
                if raw.len() != h * w {
                    return Err(Error::format(&p, format!("{} bytes for a {h}x{w} label", raw.len())));
                }
                let idx: Vec<usize> = raw.into_iter().map(usize::from).collect();
                Some(LabelMap::from_indices(h, w, &idx, index.class_names.clone()).map_err(|err| Error::format(&p, err.to_string()))?)
            }
            None => None,
        };
        out.push(StoredSample { sample: Sample::new(image, label)?, split: e.split, annotated: e.annotated });
    }
    Ok((index, out))
}

/// SHA-256 over the index and every referenced slice file, in index order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let index = read_index(dir)?;
    let mut h = Sha256::new();
    let p = dir.join(INDEX);
    h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    for e in &index.entries {
        for f in std::iter::once(&e.image_file).chain(e.label_file.as_ref()) {
            let p = dir.join(f);
            h.update(fs::read(&p).map_err(|err| Error::io(&p, err))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
