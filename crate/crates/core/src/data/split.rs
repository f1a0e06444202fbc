//! Stratified K-fold assignment and per-round train/val/test roles.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Label;

pub const DEFAULT_K: usize = 5;
/// Share of the non-test units held out for validation in each round.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => Err(Error::InvalidSpec(format!("unknown split {s:?}, expected train, val or test"))),
        }
    }
}

/// Fold of every unit (subject, or slice in leaky mode).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
    pub labels: BTreeMap<String, Label>,
}

fn by_class(units: &[(String, Label)]) -> Result<BTreeMap<Label, Vec<String>>> {
    let mut groups: BTreeMap<Label, BTreeSet<String>> = BTreeMap::new();
    let mut seen = BTreeMap::new();
    for (id, label) in units {
        if let Some(prev) = seen.insert(id.clone(), *label) {
            if prev != *label {
                return Err(Error::InvalidData(format!("{id} carries labels {prev} and {label}")));
            }
        }
        groups.entry(*label).or_default().insert(id.clone());
    }
    Ok(groups.into_iter().map(|(l, ids)| (l, ids.into_iter().collect())).collect())
}

/// Shuffle each class (sorted first, so input order never matters) and deal
/// it round-robin over the folds. Each class's dealing starts where the
/// previous class stopped, which keeps fold totals within one unit.
pub fn kfold_split(units: &[(String, Label)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidSpec(format!("k = {k}, need at least 2 folds")));
    }
    let groups = by_class(units)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut cursor = 0;
    for (label, mut ids) in groups {
        if ids.len() < k {
            return Err(Error::TooFewSubjects { class: label.to_string(), have: ids.len(), need: k });
        }
        ids.shuffle(&mut rng);
        for id in ids {
            folds.insert(id.clone(), cursor % k);
            labels.insert(id, label);
            cursor += 1;
        }
    }
    Ok(FoldAssignment { k, folds, labels })
}

/// Roles for one round: fold `round` is the test set; the rest is split
/// per class into train and validation (`VAL_FRACTION`, rounded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSplit {
    pub round: usize,
    pub roles: BTreeMap<String, Role>,
}

impl RoundSplit {
    pub fn members(&self, role: Role) -> Vec<&str> {
        self.roles.iter().filter(|(_, &r)| r == role).map(|(id, _)| id.as_str()).collect()
    }

    pub fn role(&self, id: &str) -> Option<Role> {
        self.roles.get(id).copied()
    }
}

impl FoldAssignment {
    pub fn round(&self, round: usize, seed: u64) -> Result<RoundSplit> {
        if round >= self.k {
            return Err(Error::InvalidSpec(format!("fold {round} out of range for k = {}", self.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut roles = BTreeMap::new();
        let mut rest: BTreeMap<Label, Vec<String>> = BTreeMap::new();
        for (id, &fold) in &self.folds {
            if fold == round {
                roles.insert(id.clone(), Role::Test);
            } else {
                rest.entry(self.labels[id]).or_default().push(id.clone());
            }
        }
        for ids in rest.values_mut() {
            ids.shuffle(&mut rng);
            let n_val = (ids.len() as f64 * VAL_FRACTION).round() as usize;
            for (i, id) in ids.iter().enumerate() {
                roles.insert(id.clone(), if i < n_val { Role::Val } else { Role::Train });
            }
        }
        Ok(RoundSplit { round, roles })
    }
}
