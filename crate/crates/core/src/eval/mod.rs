//! Segmentation metrics, paired significance tests, and run reports.

pub mod metrics;
pub mod wilcoxon;
pub mod report;

pub use metrics::{dice, hausdorff, iou, mean_foreground_dice, score_label_maps, ClassScores, Hausdorff};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult};
pub use report::{format_cell, format_row, summarize, summarize_and_report, PairedSummary, ReportFiles};
