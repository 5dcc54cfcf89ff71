//! Discriminator loss bookkeeping and end-of-training convergence verdicts.
//!
//! A discriminator that outputs 0 for everything sits at total loss 1.0
//! (0.5 real + 0.5 fake). One that memorises the training reals scores
//! unseen reals as fake, pushing the validation real component to 2.0.

use crate::error::{Error, Result};
use crate::models::{Discriminator, Pass};
use advtta_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// One epoch of ½-weighted least-squares components plus the validation
/// segmentation loss that drives early stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub real_train: f64,
    pub fake_train: f64,
    pub real_val: f64,
    pub fake_val: f64,
    pub seg_val_ce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "epoch,d_real_train,d_fake_train,d_real_val,d_fake_val,seg_val_ce";

impl LossTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        let parts = [row.real_train, row.fake_train, row.real_val, row.fake_val];
        if parts.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract(format!("loss components must be non-negative, got {parts:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// CSV with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.real_train, r.fake_train, r.real_val, r.fake_val, r.seg_val_ce
            )
            .expect("writing to a string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<LossTrace> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(TRACE_HEADER) {
            return Err(Error::format(path, "unexpected trace header"));
        }
        let mut trace = LossTrace::default();
        for (n, line) in lines.enumerate() {
            let bad = || Error::format(path, format!("bad trace line {}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            trace.push(TraceRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                real_train: num(1)?,
                fake_train: num(2)?,
                real_val: num(3)?,
                fake_val: num(4)?,
                seg_val_ce: num(5)?,
            })?;
        }
        Ok(trace)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Healthy,
    Equilibrium,
    Memorisation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailMeans {
    pub real_train: f64,
    pub fake_train: f64,
    pub real_val: f64,
    pub fake_val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseVerdict {
    pub verdict: Verdict,
    pub tail: usize,
    pub tol: f64,
    pub evidence: TailMeans,
}

pub const DEFAULT_TAIL: usize = 10;
pub const DEFAULT_TOL: f64 = 0.15;

/// Labels the end of a trace by the tail means of its validation components.
pub fn classify_convergence(trace: &LossTrace, tail: usize, tol: f64) -> Result<CollapseVerdict> {
    if tail == 0 || trace.len() < tail {
        return Err(Error::Contract(format!("trace of length {} is shorter than the tail {tail}", trace.len())));
    }
    let rows = &trace.rows[trace.len() - tail..];
    let mean = |f: fn(&TraceRow) -> f64| rows.iter().map(f).sum::<f64>() / tail as f64;
    let evidence = TailMeans {
        real_train: mean(|r| r.real_train),
        fake_train: mean(|r| r.fake_train),
        real_val: mean(|r| r.real_val),
        fake_val: mean(|r| r.fake_val),
    };
    let (rv, fv) = (evidence.real_val, evidence.fake_val);
    let verdict = if (rv - 0.5).abs() <= tol && (fv - 0.5).abs() <= tol {
        Verdict::Equilibrium
    } else if (rv - 2.0).abs() <= 4.0 * tol && fv <= tol {
        Verdict::Memorisation
    } else {
        Verdict::Healthy
    };
    Ok(CollapseVerdict { verdict, tail, tol, evidence })
}

/// Discriminator inputs for one validation batch, all `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct DiscBatch {
    pub real: Tensor,
    pub predicted: Tensor,
    pub corrupted: Option<Tensor>,
}

/// Real and fake components of the discriminator loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Components {
    pub real: f64,
    pub fake: f64,
}

/// ½·mean((s − target)²) over plain scores.
pub fn half_mse(scores: &[f64], target: f64) -> f64 {
    0.5 * scores.iter().map(|s| (s - target).powi(2)).sum::<f64>() / scores.len() as f64
}

/// Scores every batch with a frozen discriminator and averages over all
/// samples. The fake part weights predicted and corrupted scores equally.
pub fn record_epoch(d: &Discriminator, batches: &[DiscBatch]) -> Result<Components> {
    let score = |x: &Tensor| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let out = d.forward(&tape, tape.constant(x.clone()), Pass::FROZEN)?;
        Ok(out.value().data().to_vec())
    };
    let (mut real, mut pred, mut corr) = (Vec::new(), Vec::new(), Vec::new());
    for b in batches {
        real.extend(score(&b.real)?);
        pred.extend(score(&b.predicted)?);
        if let Some(c) = &b.corrupted {
            corr.extend(score(c)?);
        }
    }
    if real.is_empty() || pred.is_empty() {
        return Err(Error::Contract("record_epoch needs at least one real and one predicted mask".into()));
    }
    let fake_pred = half_mse(&pred, -1.0);
    let fake = if corr.is_empty() { fake_pred } else { 0.5 * (fake_pred + half_mse(&corr, -1.0)) };
    Ok(Components { real: half_mse(&real, 1.0), fake })
}
