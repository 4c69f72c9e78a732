//! Stratified k-fold partitions and the train/validation/test rotation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// `folds[s][f]` holds the positions (into species `s`'s window list) of
/// fold `f`, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub test: usize,
    pub val: usize,
    pub train: Vec<usize>,
}

/// Round `i`: test fold `i`, validation fold `i + 1 (mod k)`, the rest train.
pub fn rotation(i: usize, k: usize) -> Rotation {
    let val = (i + 1) % k;
    Rotation {
        test: i,
        val,
        train: (0..k).filter(|&f| f != i && f != val).collect(),
    }
}

/// Per species, shuffles each class with its own seeded stream and deals the
/// members round-robin into `k` folds. The dealing position carries over
/// from one class to the next so fold sizes stay within one of each other.
pub fn stratified_folds(labels: &[Vec<usize>], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut folds = Vec::with_capacity(labels.len());
    for (s, labs) in labels.iter().enumerate() {
        let classes = labs.iter().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (pos, &l) in labs.iter().enumerate() {
            by_class[l].push(pos);
        }
        let mut species_folds = vec![Vec::new(); k];
        let mut next = 0;
        for (c, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < k {
                return Err(Error::TooFewForFolds {
                    species: s,
                    class: c,
                    count: members.len(),
                    folds: k,
                });
            }
            members.shuffle(&mut seeded(derive_seed(seed, &[s as u64, c as u64])));
            for m in members {
                species_folds[next % k].push(m);
                next += 1;
            }
        }
        for f in &mut species_folds {
            f.sort_unstable();
        }
        folds.push(species_folds);
    }
    Ok(FoldPlan { k, folds })
}

impl FoldPlan {
    pub fn gather(&self, species: usize, which: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = which
            .iter()
            .flat_map(|&f| self.folds[species][f].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}
