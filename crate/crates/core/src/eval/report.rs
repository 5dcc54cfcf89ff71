//! Paired before/after summaries, CSV/JSON output, plots, and ablation tables.

use super::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
use crate::error::{Error, Result};
use crate::ttt::MetricRecord;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const METRICS: [&str; 3] = ["dice", "iou", "hausdorff_px"];
pub const SIGNIFICANCE: f64 = 0.01;

fn metric_value(r: &MetricRecord, metric: &str) -> f64 {
    match metric {
        "dice" => r.dice,
        "iou" => r.iou,
        "hausdorff_px" => r.hausdorff_px,
        "hausdorff_mm" => r.hausdorff_mm,
        other => unreachable!("unknown metric {other}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub metric: String,
    /// Instances (slices); per-class values are averaged with equal weight first.
    pub n: usize,
    pub before_mean: f64,
    pub before_std: f64,
    pub after_mean: f64,
    pub after_std: f64,
    pub wilcoxon: Option<WilcoxonResult>,
    /// `p < 0.01`, when a test could be run.
    pub significant: Option<bool>,
    pub sentinel_count_before: usize,
    pub sentinel_count_after: usize,
}

fn check_aligned(before: &[MetricRecord], after: &[MetricRecord]) -> Result<()> {
    if before.len() != after.len() {
        return Err(Error::Contract(format!("{} before records vs {} after", before.len(), after.len())));
    }
    for (a, b) in before.iter().zip(after) {
        if (&a.patient_id, a.slice_index, &a.class_name) != (&b.patient_id, b.slice_index, &b.class_name) {
            return Err(Error::Contract(format!(
                "records misaligned at {}/{}/{} vs {}/{}/{}",
                a.patient_id, a.slice_index, a.class_name, b.patient_id, b.slice_index, b.class_name
            )));
        }
    }
    Ok(())
}

/// Per-instance means over classes, in first-seen instance order.
pub fn per_instance(records: &[MetricRecord], metric: &str) -> Vec<f64> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in records {
        let key = (r.patient_id.clone(), r.slice_index);
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        e.0 += metric_value(r, metric);
        e.1 += 1;
    }
    order.iter().map(|k| acc[k].0 / acc[k].1 as f64).collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn summarize(before: &[MetricRecord], after: &[MetricRecord]) -> Result<Vec<PairedSummary>> {
    check_aligned(before, after)?;
    METRICS
        .iter()
        .map(|&m| {
            let (b, a) = (per_instance(before, m), per_instance(after, m));
            let (bm, bs) = mean_std(&b);
            let (am, as_) = mean_std(&a);
            let wilcoxon = match wilcoxon_signed_rank(&b, &a) {
                Ok(w) => Some(w),
                Err(Error::Contract(_)) => None,
                Err(e) => return Err(e),
            };
            let significant = wilcoxon.as_ref().map(|w| w.p_value < SIGNIFICANCE);
            Ok(PairedSummary {
                metric: m.to_string(),
                n: b.len(),
                before_mean: bm,
                before_std: bs,
                after_mean: am,
                after_std: as_,
                wilcoxon,
                significant,
                sentinel_count_before: before.iter().filter(|r| r.hausdorff_sentinel).count(),
                sentinel_count_after: after.iter().filter(|r| r.hausdorff_sentinel).count(),
            })
        })
        .collect()
}

pub const METRICS_HEADER: &str = "patient_id,slice_index,class_name,metric,phase,value";

/// One row per instance, class, metric and phase.
pub fn metrics_csv(before: &[MetricRecord], after: &[MetricRecord]) -> Result<String> {
    check_aligned(before, after)?;
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (phase, recs) in [("before", before), ("after", after)] {
        for r in recs {
            for m in ["dice", "iou", "hausdorff_px", "hausdorff_mm"] {
                writeln!(s, "{},{},{},{m},{phase},{:e}", r.patient_id, r.slice_index, r.class_name, metric_value(r, m))
                    .expect("writing to a string");
            }
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `metrics.csv`, `summary.json` and per-metric plots into `out_dir`.
pub fn summarize_and_report(before: &[MetricRecord], after: &[MetricRecord], out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = metrics_csv(before, after)?;
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, csv).map_err(|e| Error::io(&metrics_path, e))?;
    let summary = summarize(before, after)?;
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&summary_path, e))?;
    let mut plots = Vec::new();
    if !before.is_empty() {
        for m in METRICS {
            let (b, a) = (per_instance(before, m), per_instance(after, m));
            let p = out_dir.join(format!("violin_{m}.png"));
            violin_plot(&b, &a).save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
            plots.push(p);
        }
        let p = out_dir.join("bars.png");
        bar_plot(&summary).save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
        plots.push(p);
    }
    Ok(ReportFiles { metrics_csv: metrics_path, summary_json: summary_path, plots })
}

const BEFORE_RGB: Rgb<u8> = Rgb([40, 70, 160]);
const AFTER_RGB: Rgb<u8> = Rgb([150, 90, 40]);
const AXIS_RGB: Rgb<u8> = Rgb([0, 0, 0]);

fn range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        (lo - 0.5, lo + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Mirrored Gaussian-kernel density of each sample, side by side.
pub fn violin_plot(before: &[f64], after: &[f64]) -> RgbImage {
    let (w, h) = (320u32, 240u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let all: Vec<f64> = before.iter().chain(after).copied().collect();
    let (lo, hi) = range(&all);
    let to_y = |v: f64| ((1.0 - (v - lo) / (hi - lo)) * (h - 1) as f64).round() as u32;
    for y in 0..h {
        img.put_pixel(0, y, AXIS_RGB);
    }
    for (k, (vals, rgb)) in [(before, BEFORE_RGB), (after, AFTER_RGB)].into_iter().enumerate() {
        if vals.is_empty() {
            continue;
        }
        let cx = (w / 4) * (2 * k as u32 + 1);
        let (_, sd) = mean_std(vals);
        let bw = (1.06 * sd.max((hi - lo) * 0.02) * (vals.len() as f64).powf(-0.2)).max(1e-9);
        let dens: Vec<f64> = (0..h)
            .map(|y| {
                let v = hi - (y as f64 / (h - 1) as f64) * (hi - lo);
                vals.iter().map(|x| (-0.5 * ((v - x) / bw).powi(2)).exp()).sum::<f64>()
            })
            .collect();
        let peak = dens.iter().copied().fold(0.0, f64::max).max(1e-300);
        for (y, d) in dens.iter().enumerate() {
            let half = (d / peak * (w / 4 - 8) as f64).round() as u32;
            for x in cx.saturating_sub(half)..=(cx + half).min(w - 1) {
                img.put_pixel(x, y as u32, rgb);
            }
        }
        let (m, _) = mean_std(vals);
        let my = to_y(m).min(h - 1);
        for x in cx.saturating_sub(w / 8)..=(cx + w / 8) {
            img.put_pixel(x, my, AXIS_RGB);
        }
    }
    img
}

/// Before/after mean bars with one-standard-deviation whiskers, one group per metric.
pub fn bar_plot(summary: &[PairedSummary]) -> RgbImage {
    let (w, h) = (120 * summary.len().max(1) as u32, 240u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (g, s) in summary.iter().enumerate() {
        let top = (s.before_mean + s.before_std).max(s.after_mean + s.after_std).max(1e-12);
        let to_y = |v: f64| (h - 1) - ((v.max(0.0) / top) * (h - 20) as f64).round().min((h - 1) as f64) as u32;
        for (k, (m, sd, rgb)) in
            [(s.before_mean, s.before_std, BEFORE_RGB), (s.after_mean, s.after_std, AFTER_RGB)].into_iter().enumerate()
        {
            if !m.is_finite() {
                continue;
            }
            let x0 = 120 * g as u32 + 20 + 42 * k as u32;
            for x in x0..x0 + 36 {
                for y in to_y(m)..h {
                    img.put_pixel(x, y, rgb);
                }
            }
            let (ya, yb) = (to_y(m + sd), to_y((m - sd).max(0.0)));
            for y in ya..=yb {
                img.put_pixel(x0 + 18, y, AXIS_RGB);
            }
        }
    }
    img
}

const SUBSCRIPTS: [char; 10] = ['₀', '₁', '₂', '₃', '₄', '₅', '₆', '₇', '₈', '₉'];

/// `mean` with one decimal and `std` rounded to an integer subscript, e.g. `70.1₁₃`.
pub fn format_cell(mean: f64, std: f64) -> String {
    let sub: String = format!("{}", std.round() as i64)
        .chars()
        .map(|c| c.to_digit(10).map_or(c, |d| SUBSCRIPTS[d as usize]))
        .collect();
    format!("{mean:.1}{sub}")
}

pub fn format_row(cells: &[(f64, f64)]) -> String {
    cells.iter().map(|&(m, s)| format_cell(m, s)).collect::<Vec<_>>().join(" ")
}

/// Markdown ablation table: one column per run, Dice in percent.
pub fn ablation_table(columns: &[(String, f64, f64)]) -> String {
    let mut s = String::new();
    let head: Vec<&str> = columns.iter().map(|c| c.0.as_str()).collect();
    writeln!(s, "| {} |", head.join(" | ")).expect("writing to a string");
    writeln!(s, "|{}", "---|".repeat(columns.len())).expect("writing to a string");
    let cells: Vec<String> = columns.iter().map(|c| format_cell(100.0 * c.1, 100.0 * c.2)).collect();
    writeln!(s, "| {} |", cells.join(" | ")).expect("writing to a string");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pid: &str, slice: usize, class: &str, dice: f64) -> MetricRecord {
        MetricRecord {
            patient_id: pid.into(),
            slice_index: slice,
            class_name: class.into(),
            dice,
            iou: dice / (2.0 - dice),
            hausdorff_px: 10.0 * (1.0 - dice),
            hausdorff_mm: 15.1 * (1.0 - dice),
            hausdorff_sentinel: false,
        }
    }

    #[test]
    fn table_row_formatting() {
        let row = format_row(&[(70.1, 13.0), (70.0, 12.0), (70.9, 11.0), (71.2, 10.0), (72.4, 10.0)]);
        assert_eq!(row, "70.1₁₃ 70.0₁₂ 70.9₁₁ 71.2₁₀ 72.4₁₀");
        let t = ablation_table(&[("UNet".into(), 0.701, 0.13), ("GAN".into(), 0.70, 0.12)]);
        assert!(t.contains("| 70.1₁₃ | 70.0₁₂ |"));
    }

    #[test]
    fn empty_input_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = summarize_and_report(&[], &[], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(files.metrics_csv).unwrap(), format!("{METRICS_HEADER}\n"));
        assert!(files.plots.is_empty());
    }

    #[test]
    fn summary_means_match_scalar_recomputation() {
        let mut before = Vec::new();
        let mut after = Vec::new();
        for i in 0..8 {
            for (k, c) in ["ventricle", "myocardium"].iter().enumerate() {
                let d = 0.5 + 0.05 * i as f64 - 0.1 * k as f64;
                before.push(rec("p", i, c, d));
                after.push(rec("p", i, c, d + 0.01 * (i % 3) as f64 + 0.001));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let files = summarize_and_report(&before, &after, dir.path()).unwrap();
        assert_eq!(files.plots.len(), 4);
        let s: Vec<PairedSummary> = serde_json::from_slice(&std::fs::read(files.summary_json).unwrap()).unwrap();
        let dice = s.iter().find(|x| x.metric == "dice").unwrap();
        let mut oracle = 0.0;
        for r in &after {
            oracle += r.dice;
        }
        oracle /= after.len() as f64;
        assert!((dice.after_mean - oracle).abs() <= 1e-9);
        assert_eq!(dice.n, 8);
        assert!(dice.wilcoxon.as_ref().unwrap().p_value < 0.01);
        let rows = std::fs::read_to_string(files.metrics_csv).unwrap().lines().count();
        assert_eq!(rows, 1 + 2 * 16 * 4);
        let mut shuffled = after.clone();
        shuffled.swap(0, 3);
        assert!(matches!(summarize(&before, &shuffled), Err(Error::Contract(_))));
    }
}
