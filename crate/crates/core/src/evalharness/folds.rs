use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{FormError, Result};

/// Patient id to fold index; every image half of a patient follows its
/// patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.folds.get(patient_id).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.folds.values() {
            s[f] += 1;
        }
        s
    }
}

/// Stratified shuffled k-fold partition. `strata[i]` tags patient `ids[i]`
/// (e.g. positive / negative / censored). Patients are dealt round-robin
/// stratum by stratum with one running counter, so overall fold sizes and
/// every stratum's per-fold counts differ by at most one.
pub fn kfold_split(ids: &[String], strata: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if ids.len() != strata.len() {
        return Err(FormError::DimMismatch { expected: vec![ids.len()], got: vec![strata.len()] });
    }
    if k == 0 || k > ids.len() {
        return Err(FormError::Validation(format!("cannot split {} patients into {k} folds", ids.len())));
    }
    let mut by_stratum: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, &s) in ids.iter().zip(strata) {
        by_stratum.entry(s).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut next = 0usize;
    for members in by_stratum.values_mut() {
        members.sort();
        members.shuffle(&mut rng);
        for id in members.iter() {
            if folds.insert((*id).clone(), next % k).is_some() {
                return Err(FormError::Validation(format!("duplicate patient id `{id}`")));
            }
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}
