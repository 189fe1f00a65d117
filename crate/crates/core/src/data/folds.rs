//! Patient-level, label-stratified k-fold plans.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::manifest::ManifestEntry;
use crate::error::{Error, Result};
use crate::numerics::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Patient id to the fold whose test split contains it.
    pub assignment: BTreeMap<String, usize>,
    /// Per fold: training patients held out for validation.
    pub validation: Vec<BTreeSet<String>>,
}

impl FoldPlan {
    pub fn role(&self, fold: usize, patient: &str) -> Option<Role> {
        let f = *self.assignment.get(patient)?;
        Some(if f == fold {
            Role::Test
        } else if self.validation[fold].contains(patient) {
            Role::Val
        } else {
            Role::Train
        })
    }

    pub fn patients(&self, fold: usize, role: Role) -> Vec<&str> {
        self.assignment
            .keys()
            .filter(|p| self.role(fold, p) == Some(role))
            .map(String::as_str)
            .collect()
    }
}

/// Patient labels; a patient whose images disagree on the label is rejected.
fn patient_labels(entries: &[ManifestEntry]) -> Result<BTreeMap<String, u8>> {
    let mut labels = BTreeMap::new();
    for e in entries {
        if let Some(prev) = labels.insert(e.patient_id.clone(), e.label) {
            if prev != e.label {
                return Err(Error::config(format!(
                    "patient {:?} has images with both labels",
                    e.patient_id
                )));
            }
        }
    }
    Ok(labels)
}

/// Shuffles each class with the fold stream and deals patients round-robin,
/// continuing the dealer position across classes so fold totals stay level.
/// Per fold, `ceil(validation_fraction * n)` training patients of each class
/// (keeping at least one for training) go to validation; if that leaves no
/// validation patient at all, one is taken from the larger class.
pub fn make_folds(entries: &[ManifestEntry], k: usize, validation_fraction: f64, key: StreamKey) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config(format!(
            "validation fraction must lie in [0, 1), got {validation_fraction}"
        )));
    }
    let labels = patient_labels(entries)?;
    let mut by_class: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    for (p, &y) in &labels {
        by_class[y as usize].push(p.clone());
    }
    for (y, class) in by_class.iter().enumerate() {
        if class.len() < k {
            return Err(Error::config(format!(
                "{} patients with label {y}; {k}-fold cross-validation needs at least {k}",
                class.len()
            )));
        }
    }

    let mut assignment = BTreeMap::new();
    let mut dealer = 0;
    for (y, class) in by_class.iter().enumerate() {
        let mut shuffled = class.clone();
        shuffled.shuffle(&mut key.child(y as u64).rng());
        for p in shuffled {
            assignment.insert(p, dealer % k);
            dealer += 1;
        }
    }

    let mut validation = Vec::with_capacity(k);
    for fold in 0..k {
        let mut chosen = BTreeSet::new();
        let mut pools: Vec<Vec<String>> = Vec::new();
        for (y, class) in by_class.iter().enumerate() {
            let mut train: Vec<String> = class.iter().filter(|p| assignment[*p] != fold).cloned().collect();
            train.shuffle(&mut key.child(100 + fold as u64).child(y as u64).rng());
            let n = train.len();
            let take = if n >= 2 {
                ((validation_fraction * n as f64).ceil() as usize).clamp(1, n - 1)
            } else {
                0
            };
            let take = if validation_fraction == 0.0 { 0 } else { take };
            chosen.extend(train.drain(..take));
            pools.push(train);
        }
        if chosen.is_empty() && validation_fraction > 0.0 {
            let (larger, _) = pools
                .iter()
                .enumerate()
                .max_by_key(|(y, p)| (p.len(), std::cmp::Reverse(*y)))
                .expect("two classes");
            if pools[larger].len() + pools[1 - larger].len() >= 2 {
                chosen.insert(pools[larger][0].clone());
            }
        }
        validation.push(chosen);
    }

    Ok(FoldPlan {
        k,
        assignment,
        validation,
    })
}
