use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Firm-level fold labels in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, firm: &str) -> Option<usize> {
        self.folds.get(firm).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.k];
        for &f in self.folds.values() {
            n[f] += 1;
        }
        n
    }
}

/// Stratified assignment: each stratum (defaulted-ever or not) is shuffled
/// and dealt round-robin, the second stratum continuing where the first stopped.
pub fn assign_folds(firms: &[(String, bool)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be at least 2, got {k}")));
    }
    if k > firms.len() {
        return Err(Error::invalid(format!("fold count {k} exceeds firm count {}", firms.len())));
    }
    let mut rng = named_rng(seed, "folds");
    let mut folds = BTreeMap::new();
    let mut next = 0usize;
    for stratum in [true, false] {
        let mut ids: Vec<&String> = firms.iter().filter(|(_, d)| *d == stratum).map(|(id, _)| id).collect();
        ids.sort();
        ids.dedup();
        ids.shuffle(&mut rng);
        for id in ids {
            if folds.insert(id.clone(), next % k).is_some() {
                return Err(Error::invalid(format!("firm `{id}` listed with conflicting default flags")));
            }
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

/// Observation indices by role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Route each observation by its firm's fold: `test` fold, `val` fold, the rest train.
pub fn split_from_folds(ds: &Dataset, folds: &FoldAssignment, test: usize, val: usize) -> Result<Split> {
    if test >= folds.k || val >= folds.k || test == val {
        return Err(Error::invalid(format!("bad test/val folds {test}/{val} for k = {}", folds.k)));
    }
    let mut split = Split::default();
    for (i, o) in ds.observations.iter().enumerate() {
        let id = &ds.firms[o.firm].id;
        let f = folds.fold_of(id).ok_or_else(|| Error::invalid(format!("firm `{id}` has no fold")))?;
        match f {
            f if f == test => split.test.push(i),
            f if f == val => split.val.push(i),
            _ => split.train.push(i),
        }
    }
    Ok(split)
}

impl Split {
    /// 60/20/20 by firm: five stratified folds, fold 4 test, fold 3 validation.
    pub fn holdout(ds: &Dataset, seed: u64) -> Result<Self> {
        let folds = assign_folds(&ds.firm_default_flags(), 5, seed)?;
        split_from_folds(ds, &folds, 4, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn firms(n: usize, defaulters: usize) -> Vec<(String, bool)> {
        (0..n).map(|i| (format!("F{i:03}"), i < defaulters)).collect()
    }

    #[test]
    fn every_firm_once() {
        let a = assign_folds(&firms(57, 6), 10, 3).unwrap();
        assert_eq!(a.folds.len(), 57);
        assert!(a.folds.values().all(|&f| f < 10));
        let sizes = a.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn defaulters_balanced() {
        let a = assign_folds(&firms(20, 10), 2, 0).unwrap();
        for fold in 0..2 {
            let d = a.folds.iter().filter(|(id, f)| **f == fold && id[1..].parse::<usize>().unwrap() < 10).count();
            assert_eq!(d, 5);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let f = firms(40, 7);
        assert_eq!(assign_folds(&f, 4, 9).unwrap(), assign_folds(&f, 4, 9).unwrap());
        assert_ne!(assign_folds(&f, 4, 9).unwrap(), assign_folds(&f, 4, 10).unwrap());
    }

    #[test]
    fn errors() {
        assert!(assign_folds(&firms(3, 1), 4, 0).is_err());
        assert!(assign_folds(&firms(3, 1), 1, 0).is_err());
    }
}
