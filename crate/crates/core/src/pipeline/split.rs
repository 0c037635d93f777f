//! Patient-level test split and cross-validation folds.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::stream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// The non-test patients are shuffled once. Fold `k` validates on the
/// `k`-th consecutive group of `n_val` patients (so validation groups are
/// disjoint) and trains on `n_train` patients drawn from the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub test: Vec<String>,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub n_test: usize,
    pub n_folds: usize,
    pub n_val: usize,
    pub n_train: usize,
}

const SPLIT_STREAM: usize = 0xFFFF_0000;

pub fn split_dataset(patients: &[String], seed: u64, sizes: SplitSizes) -> Result<FoldPlan> {
    let mut sorted = patients.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != patients.len() {
        return Err(Error::InvalidArgument("duplicate patient ids".into()));
    }
    let SplitSizes {
        n_test,
        n_folds,
        n_val,
        n_train,
    } = sizes;
    if n_folds == 0 || n_val == 0 || n_train == 0 {
        return Err(Error::InvalidArgument("folds need training and validation patients".into()));
    }
    let pool = sorted.len().saturating_sub(n_test);
    if n_test > sorted.len() || n_folds * n_val > pool || n_val + n_train > pool {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot hold {n_test} test and {n_folds} folds of {n_val} validation + {n_train} training",
            sorted.len()
        )));
    }
    let mut rng = stream(seed, SPLIT_STREAM, None);
    sorted.shuffle(&mut rng);
    let mut test = sorted[..n_test].to_vec();
    test.sort();
    let rest = &sorted[n_test..];
    let folds = (0..n_folds)
        .map(|k| {
            let mut val = rest[k * n_val..(k + 1) * n_val].to_vec();
            let mut others: Vec<String> = rest.iter().filter(|p| !val.contains(p)).cloned().collect();
            let mut frng = stream(seed, SPLIT_STREAM, Some(k));
            others.shuffle(&mut frng);
            let mut train = others[..n_train].to_vec();
            train.sort();
            val.sort();
            Fold { index: k, train, val }
        })
        .collect();
    let plan = FoldPlan { seed, test, folds };
    check_no_leakage(&plan)?;
    Ok(plan)
}

/// Fails if any patient appears in two of (train, val, test) of a fold.
pub fn check_no_leakage(plan: &FoldPlan) -> Result<()> {
    for f in &plan.folds {
        if f.val.is_empty() || f.train.is_empty() {
            return Err(Error::InvalidArgument(format!("fold {} is empty", f.index)));
        }
        for (a, b, what) in [(&f.train, &f.val, "train/val"), (&f.train, &plan.test, "train/test"), (&f.val, &plan.test, "val/test")] {
            if let Some(p) = a.iter().find(|p| b.contains(p)) {
                return Err(Error::InvalidArgument(format!("patient {p} leaks across {what} in fold {}", f.index)));
            }
        }
    }
    Ok(())
}
