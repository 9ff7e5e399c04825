use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChangeClass;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Sorted sample ids used for fitting.
    pub train: Vec<usize>,
    /// Sorted held-out sample ids.
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Stratified k-fold partition of `0..labels.len()`.
///
/// Each class is shuffled and dealt round-robin across folds; the dealing
/// position carries over from one class to the next, so fold sizes differ
/// by at most one overall as well as within each class.
pub fn kfold_split(k: usize, labels: &[ChangeClass], seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} samples cannot fill {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation = vec![Vec::new(); k];
    let mut slot = 0;
    for class in ChangeClass::ALL {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            validation[slot % k].push(i);
            slot += 1;
        }
    }
    let folds = validation
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let mut held = vec![false; n];
            for &i in &val {
                held[i] = true;
            }
            Fold { train: (0..n).filter(|&i| !held[i]).collect(), validation: val }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_samples_five_folds() {
        let labels: Vec<_> = (0..10).map(|i| ChangeClass::ALL[i % 3]).collect();
        let plan = kfold_split(5, &labels, 1).unwrap();
        let mut seen = [0; 10];
        for f in &plan.folds {
            assert_eq!(f.validation.len(), 2);
            assert_eq!(f.train.len(), 8);
            for &i in &f.validation {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(plan, kfold_split(5, &labels, 1).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(kfold_split(5, &[ChangeClass::Increase; 3], 0).is_err());
    }
}
