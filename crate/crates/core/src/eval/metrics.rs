//! Overlap metrics and the symmetric Hausdorff distance on binary masks.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("mask sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    (inter, a.iter().filter(|v| **v).count(), b.iter().filter(|v| **v).count())
}

/// `2|a∩b| / (|a| + |b|)`; 1 when both are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a, b)?;
    let (i, na, nb) = counts(a, b);
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (na + nb) as f64)
}

/// `|a∩b| / |a∪b|`; 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a, b)?;
    let (i, na, nb) = counts(a, b);
    let union = na + nb - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

const UNSET: f64 = f64::INFINITY;

/// One-dimensional squared distance transform of `f` (lower envelope of
/// parabolas) for sample positions `spacing·q`. Infinite entries never
/// enter the envelope, so finite outputs are exact sums of squares.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let x = |q: usize| spacing * q as f64;
    for q in 0..n {
        if f[q] == UNSET {
            continue;
        }
        loop {
            let Some(&top) = v.last() else {
                v.push(q);
                z.clear();
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + x(q) * x(q)) - (f[top] + x(top) * x(top))) / (2.0 * (x(q) - x(top)));
            if s <= *z.last().expect("envelope has a boundary") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    continue;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(UNSET);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(p) {
            k += 1;
        }
        let d = x(p) - x(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest member of `set`
/// (infinite everywhere when the set is empty).
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut g = vec![UNSET; h * w];
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = if set[i * w + j] { 0.0 } else { UNSET };
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for i in 0..h {
            g[i * w + j] = tmp[i];
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        edt_1d(&g[i * w..(i + 1) * w], spacing.1, &mut out[i * w..(i + 1) * w]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hausdorff {
    pub value: f64,
    /// True when exactly one side is empty and `value` is the image diagonal.
    pub sentinel: bool,
}

/// Symmetric Hausdorff distance between the foreground sets of two masks.
/// Both empty gives 0; one empty gives the image diagonal, flagged.
pub fn hausdorff(a: &[bool], b: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Result<Hausdorff> {
    same_len(a, b)?;
    if a.len() != h * w {
        return Err(Error::Contract(format!("mask of {} pixels is not {h}x{w}", a.len())));
    }
    let (ea, eb) = (!a.iter().any(|v| *v), !b.iter().any(|v| *v));
    if ea && eb {
        return Ok(Hausdorff { value: 0.0, sentinel: false });
    }
    if ea || eb {
        let diag = ((spacing.0 * h as f64).powi(2) + (spacing.1 * w as f64).powi(2)).sqrt();
        return Ok(Hausdorff { value: diag, sentinel: true });
    }
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, h, w, spacing);
        from.iter().zip(&dt).filter(|(m, _)| **m).map(|(_, d)| *d).fold(0.0, f64::max)
    };
    Ok(Hausdorff { value: directed(a, b).max(directed(b, a)).sqrt(), sentinel: false })
}

/// Metrics for one foreground class of one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class_index: usize,
    pub dice: f64,
    pub iou: f64,
    pub hausdorff_px: f64,
    pub hausdorff_mm: f64,
    pub hausdorff_sentinel: bool,
}

/// Per-foreground-class metrics between hard maps (class 0 is background).
pub fn score_label_maps(pred: &LabelMap, truth: &LabelMap, spacing_mm: (f64, f64)) -> Result<Vec<ClassScores>> {
    if pred.hw() != truth.hw() || pred.n_classes() != truth.n_classes() {
        return Err(Error::Contract("prediction and reference maps differ in shape".into()));
    }
    let (h, w) = pred.hw();
    let (pi, ti) = (pred.argmax(), truth.argmax());
    (1..pred.n_classes())
        .map(|k| {
            let a: Vec<bool> = pi.iter().map(|&v| v == k).collect();
            let b: Vec<bool> = ti.iter().map(|&v| v == k).collect();
            let px = hausdorff(&a, &b, h, w, (1.0, 1.0))?;
            let mm = hausdorff(&a, &b, h, w, spacing_mm)?;
            Ok(ClassScores {
                class_index: k,
                dice: dice(&a, &b)?,
                iou: iou(&a, &b)?,
                hausdorff_px: px.value,
                hausdorff_mm: mm.value,
                hausdorff_sentinel: px.sentinel,
            })
        })
        .collect()
}

/// Mean foreground Dice with equal class weight.
pub fn mean_foreground_dice(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    if pred.hw() != truth.hw() || pred.n_classes() != truth.n_classes() || pred.n_classes() < 2 {
        return Err(Error::Contract("prediction and reference maps differ in shape".into()));
    }
    let (pi, ti) = (pred.argmax(), truth.argmax());
    let mut total = 0.0;
    for k in 1..pred.n_classes() {
        let a: Vec<bool> = pi.iter().map(|&v| v == k).collect();
        let b: Vec<bool> = ti.iter().map(|&v| v == k).collect();
        total += dice(&a, &b)?;
    }
    Ok(total / (pred.n_classes() - 1) as f64)
}
