//! Seeded fold plans for repeated K-fold cross-fitting.

use crate::error::{Error, Result};
use crate::stats::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A reproducible assignment of rows to folds for `s_repetitions`
/// independent K-fold partitions.
///
/// Every repetition is an exact partition: each row belongs to exactly one
/// fold, and fold sizes differ by at most one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub k_folds: usize,
    pub s_repetitions: usize,
    pub seed: u64,
    /// `assignment[rep][row]` is the fold label of `row` in repetition `rep`.
    assignment: Vec<Vec<u32>>,
}

/// Builds a fold plan. Requires `2 <= k_folds <= n` and `s_repetitions >= 1`.
pub fn make_split_plan(n: usize, k_folds: usize, s_repetitions: usize, seed: u64) -> Result<SplitPlan> {
    if k_folds < 2 {
        return Err(Error::Config(format!("k_folds must be at least 2, got {k_folds}")));
    }
    if k_folds > n {
        return Err(Error::Config(format!(
            "k_folds = {k_folds} exceeds the number of rows ({n})"
        )));
    }
    if s_repetitions == 0 {
        return Err(Error::Config("s_repetitions must be at least 1".into()));
    }
    let assignment = (0..s_repetitions)
        .map(|rep| {
            // Balanced label pool: fold f gets n/k rows plus one of the
            // remainder for the earliest folds; a seeded shuffle then
            // scatters the labels over rows.
            let mut labels: Vec<u32> = Vec::with_capacity(n);
            let base = n / k_folds;
            let rem = n % k_folds;
            for f in 0..k_folds {
                let size = base + usize::from(f < rem);
                labels.extend(std::iter::repeat_n(f as u32, size));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5111, rep as u64]));
            labels.shuffle(&mut rng);
            labels
        })
        .collect();
    Ok(SplitPlan {
        n,
        k_folds,
        s_repetitions,
        seed,
        assignment,
    })
}

impl SplitPlan {
    /// Fold label of `row` in repetition `rep`.
    pub fn fold_of(&self, rep: usize, row: usize) -> usize {
        self.assignment[rep][row] as usize
    }

    /// Rows belonging to `fold` in repetition `rep`, ascending.
    pub fn fold_rows(&self, rep: usize, fold: usize) -> Vec<usize> {
        self.assignment[rep]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f as usize == fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rows outside `fold` in repetition `rep`, ascending.
    pub fn complement_rows(&self, rep: usize, fold: usize) -> Vec<usize> {
        self.assignment[rep]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f as usize != fold)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_partition_sizes() {
        let plan = make_split_plan(10, 3, 1, 7).unwrap();
        let mut sizes: Vec<usize> = (0..3).map(|f| plan.fold_rows(0, f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = make_split_plan(57, 5, 3, 99).unwrap();
        let b = make_split_plan(57, 5, 3, 99).unwrap();
        assert_eq!(a.assignment, b.assignment);
        let c = make_split_plan(57, 5, 3, 100).unwrap();
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn repetitions_differ() {
        let plan = make_split_plan(40, 4, 2, 1).unwrap();
        assert_ne!(plan.assignment[0], plan.assignment[1]);
    }

    #[test]
    fn invalid_configurations_rejected() {
        assert!(make_split_plan(10, 1, 1, 0).is_err());
        assert!(make_split_plan(3, 4, 1, 0).is_err());
        assert!(make_split_plan(10, 2, 0, 0).is_err());
    }

    proptest! {
        /// Every repetition is an exact partition with near-equal fold sizes.
        #[test]
        fn partition_property(n in 4usize..200, k in 2usize..8, s in 1usize..4, seed in 0u64..1000) {
            prop_assume!(k <= n);
            let plan = make_split_plan(n, k, s, seed).unwrap();
            for rep in 0..s {
                let mut seen = vec![false; n];
                let mut sizes = vec![0usize; k];
                for (f, size) in sizes.iter_mut().enumerate() {
                    for row in plan.fold_rows(rep, f) {
                        prop_assert!(!seen[row], "row in two folds");
                        seen[row] = true;
                        *size += 1;
                    }
                }
                prop_assert!(seen.iter().all(|&s| s), "row missing from all folds");
                let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                prop_assert!(hi - lo <= 1, "unbalanced folds: {:?}", sizes);
                // Complement is exactly the other rows.
                let comp = plan.complement_rows(rep, 0);
                prop_assert_eq!(comp.len(), n - sizes[0]);
                for row in comp {
                    prop_assert!(plan.fold_of(rep, row) != 0);
                }
            }
        }
    }
}
