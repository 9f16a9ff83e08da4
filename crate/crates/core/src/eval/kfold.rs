//! K-fold plan construction: disjoint covering test folds, with a
//! validation slice re-sampled from each fold's training pool.

use rand::seq::SliceRandom;

use crate::eval::EvalError;
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

/// Shuffle ids 0..n and split into k near-equal test folds (sizes differ by
/// at most one). Per fold, `round(val_fraction * pool)` validation ids are
/// drawn from the remaining pool by a fresh per-fold shuffle; the rest
/// train.
pub fn kfold_plan(
    n: usize,
    k: usize,
    val_fraction: f64,
    seed: RngState,
) -> Result<FoldPlan, EvalError> {
    if k == 0 || n < k {
        return Err(EvalError::Invalid(format!("cannot split {n} ids into {k} folds")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(EvalError::Invalid(format!("val fraction {val_fraction}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seed.stream());

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = ids[offset..offset + size].to_vec();
        offset += size;
        let mut pool: Vec<usize> = ids[..offset - size]
            .iter()
            .chain(&ids[offset..])
            .copied()
            .collect();
        pool.shuffle(&mut seed.derive(fold as u64 + 1).stream());
        let val_len = (val_fraction * pool.len() as f64).round() as usize;
        let validation = pool[..val_len].to_vec();
        let train = pool[val_len..].to_vec();
        folds.push(FoldSplit {
            train,
            validation,
            test,
        });
    }
    Ok(FoldPlan {
        k,
        seed: seed.seed,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn hundred_ids_five_folds_matches_protocol() {
        let plan = kfold_plan(100, 5, 0.2, RngState::new(1)).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 20);
            // 20% of the 80-id training pool.
            assert_eq!(fold.validation.len(), 16);
            assert_eq!(fold.train.len(), 64);
        }
    }

    #[test]
    fn folds_partition_and_are_disjoint() {
        for n in [10usize, 23, 100, 101, 104] {
            let plan = kfold_plan(n, 5, 0.2, RngState::new(2)).unwrap();
            let mut all_test = BTreeSet::new();
            for fold in &plan.folds {
                for &t in &fold.test {
                    assert!(all_test.insert(t), "test id {t} appears twice");
                }
                let train: BTreeSet<_> = fold.train.iter().collect();
                let val: BTreeSet<_> = fold.validation.iter().collect();
                let test: BTreeSet<_> = fold.test.iter().collect();
                assert!(train.is_disjoint(&val));
                assert!(train.is_disjoint(&test));
                assert!(val.is_disjoint(&test));
                assert_eq!(train.len() + val.len() + test.len(), n);
            }
            assert_eq!(all_test.len(), n);
        }
    }

    #[test]
    fn partition_properties_hold_exhaustively_up_to_500() {
        let k = 5;
        for n in k..=500 {
            let plan = kfold_plan(n, k, 0.2, RngState::new(n as u64)).unwrap();
            let mut covered = vec![false; n];
            let mut sizes = Vec::new();
            for fold in &plan.folds {
                sizes.push(fold.test.len());
                for &t in &fold.test {
                    assert!(!covered[t]);
                    covered[t] = true;
                }
                let pool = n - fold.test.len();
                let expect_val = (0.2 * pool as f64).round() as usize;
                assert_eq!(fold.validation.len(), expect_val, "n={n}");
            }
            assert!(covered.iter().all(|&c| c));
            let max = sizes.iter().max().unwrap();
            let min = sizes.iter().min().unwrap();
            assert!(max - min <= 1, "n={n} sizes {sizes:?}");
        }
    }

    #[test]
    fn same_seed_reproduces_plan() {
        let a = kfold_plan(73, 5, 0.2, RngState::new(9)).unwrap();
        let b = kfold_plan(73, 5, 0.2, RngState::new(9)).unwrap();
        let c = kfold_plan(73, 5, 0.2, RngState::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_ids_is_configuration_error() {
        assert!(kfold_plan(4, 5, 0.2, RngState::new(1)).is_err());
    }
}
