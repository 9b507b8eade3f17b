use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A partition of sample ids into `k` folds whose sizes differ by at most one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Held-out ids of fold `i`.
    pub fn test_ids(&self, i: usize) -> &[String] {
        &self.folds[i]
    }

    /// Every id outside fold `i`, in fold order. With `k = 1` this is the
    /// whole set, so training and testing coincide.
    pub fn train_ids(&self, i: usize) -> Vec<String> {
        if self.k() == 1 {
            return self.folds[0].clone();
        }
        self.folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle of `ids`, then round-robin assignment to `k` folds.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || k > ids.len() {
        return Err(Error::Dataset(format!("cannot split {} samples into {k} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds, seed })
}
