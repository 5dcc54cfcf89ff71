//! Patient-level train/val/test partitioning.

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Part};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub annotated_train_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.40, val_frac: 0.20, test_frac: 0.40, annotated_train_frac: 0.25, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac, self.annotated_train_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fr:?}")));
        }
        let total = self.train_frac + self.val_frac + self.test_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn round_half_up(x: f64) -> usize {
    // Guard against 0.5 landing a hair below due to binary fractions (e.g. 5 × 0.1).
    (x + 0.5 + 1e-9).floor() as usize
}

/// Seeded assignment of each patient to a split; the bool marks annotated
/// training patients.
pub fn assign_splits(patients: &[String], spec: &SplitSpec) -> Result<BTreeMap<String, (Split, bool)>> {
    spec.validate()?;
    let unique: BTreeSet<&String> = patients.iter().collect();
    let n = unique.len();
    if n < 5 {
        return Err(Error::Config(format!("need at least 5 patients to split, got {n}")));
    }
    let n_train = round_half_up(n as f64 * spec.train_frac);
    let n_val = round_half_up(n as f64 * spec.val_frac);
    let n_ann = round_half_up(n_train as f64 * spec.annotated_train_frac);
    if n_train + n_val >= n || n_val == 0 || n_ann == 0 || n_ann >= n_train {
        return Err(Error::Config(format!(
            "{n} patients cannot populate every split ({n_ann} annotated of {n_train} train, {n_val} val)"
        )));
    }
    let mut order: Vec<&String> = unique.into_iter().collect();
    order.shuffle(&mut rng_from(spec.seed, &[Part::from("split")]));
    let mut out = BTreeMap::new();
    for (rank, pid) in order.into_iter().enumerate() {
        let entry = if rank < n_ann {
            (Split::Train, true)
        } else if rank < n_train {
            (Split::Train, false)
        } else if rank < n_train + n_val {
            (Split::Val, false)
        } else {
            (Split::Test, false)
        };
        out.insert(pid.clone(), entry);
    }
    Ok(out)
}

/// The four sample pools used by training and evaluation.
#[derive(Clone, Debug, Default)]
pub struct SplitSets {
    pub train_annotated: Vec<Sample>,
    /// Training images whose labels are hidden from every loss.
    pub train_unpaired: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSets {
    /// Patient ids per pool, in sorted order.
    pub fn patients(&self) -> [Vec<String>; 4] {
        let ids = |v: &[Sample]| {
            let s: BTreeSet<String> = v.iter().map(|x| x.image.patient_id.clone()).collect();
            s.into_iter().collect::<Vec<_>>()
        };
        [ids(&self.train_annotated), ids(&self.train_unpaired), ids(&self.val), ids(&self.test)]
    }
}

/// Splits samples by patient. Labels are dropped from the unpaired pool.
pub fn split_by_patient(samples: &[Sample], spec: &SplitSpec) -> Result<SplitSets> {
    let ids: Vec<String> = samples.iter().map(|s| s.image.patient_id.clone()).collect();
    let assignment = assign_splits(&ids, spec)?;
    let mut sets = SplitSets::default();
    for s in samples {
        match assignment[&s.image.patient_id] {
            (Split::Train, true) => {
                if !s.annotated() {
                    return Err(Error::Contract(format!(
                        "patient {} was picked for annotation but has no labels",
                        s.image.patient_id
                    )));
                }
                sets.train_annotated.push(s.clone())
            }
            (Split::Train, false) => sets.train_unpaired.push(s.clone().unlabeled()),
            (Split::Val, _) => sets.val.push(s.clone()),
            (Split::Test, _) => sets.test.push(s.clone()),
        }
    }
    Ok(sets)
}
