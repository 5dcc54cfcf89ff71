//! Two-sided Wilcoxon signed-rank test for paired samples.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest sample size (after dropping zero differences) that uses the
/// exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|`, 1-based, as doubled integers so ties stay exact.
fn doubled_ranks(d: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// For doubled ranks, the number of sign assignments giving each doubled W+.
fn null_counts(ranks: &[u64]) -> Vec<u64> {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Exact two-sided p-value of the doubled statistic `w2` for doubled ranks.
pub fn exact_p(ranks_doubled: &[u64], w2: u64) -> f64 {
    let counts = null_counts(ranks_doubled);
    let total = 2f64.powi(ranks_doubled.len() as i32);
    let lower: u64 = counts[..=w2 as usize].iter().sum();
    let upper: u64 = counts[w2 as usize..].iter().sum();
    (2.0 * lower.min(upper) as f64 / total).min(1.0)
}

fn normal_p(ranks_doubled: &[u64], w_plus: f64) -> f64 {
    let n = ranks_doubled.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = ranks_doubled.to_vec();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    let z = (w_plus - mean) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - phi.cdf(z.abs()))).min(1.0)
}

/// Tests whether `after − before` is symmetric about zero. Zero differences
/// are dropped; when nothing remains the p-value is 1 and the result is
/// flagged [`WilcoxonMethod::Degenerate`].
pub fn wilcoxon_signed_rank(before: &[f64], after: &[f64]) -> Result<WilcoxonResult> {
    if before.len() != after.len() {
        return Err(Error::Contract(format!("paired samples differ in length: {} vs {}", before.len(), after.len())));
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite paired difference".into()));
    }
    if d.is_empty() {
        return Ok(WilcoxonResult { p_value: 1.0, n: 0, w_plus: 0.0, method: WilcoxonMethod::Degenerate });
    }
    if d.len() < MIN_N {
        return Err(Error::Contract(format!("{} non-zero differences; the test needs at least {MIN_N}", d.len())));
    }
    let ranks = doubled_ranks(&d);
    let w2: u64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| *r).sum();
    let w_plus = w2 as f64 / 2.0;
    let (p_value, method) = if d.len() <= EXACT_MAX_N {
        (exact_p(&ranks, w2), WilcoxonMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus), WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult { p_value, n: d.len(), w_plus, method })
}
