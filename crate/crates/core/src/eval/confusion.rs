//! Confusion matrices and the metrics derived from them.

use crate::eval::EvalError;

/// K x K count grid; rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<ConfusionMatrix, EvalError> {
        if counts.len() != k * k {
            return Err(EvalError::Invalid(format!(
                "{} counts for a {k}x{k} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    /// Overall accuracy: trace / total. For binary matrices this equals
    /// (TN+TP)/(TN+FP+TP+FN).
    pub fn accuracy(&self) -> Result<f64, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::EmptyMatrix);
        }
        let trace: u64 = (0..self.k).map(|i| self.at(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class F1 = 2PR/(P+R); any 0/0 collapses to 0.
    pub fn f1_scores(&self) -> Vec<f64> {
        (0..self.k)
            .map(|class| {
                let tp = self.at(class, class) as f64;
                let col: u64 = (0..self.k).map(|i| self.at(i, class)).sum();
                let row: u64 = (0..self.k).map(|j| self.at(class, j)).sum();
                let precision = if col > 0 { tp / col as f64 } else { 0.0 };
                let recall = if row > 0 { tp / row as f64 } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Fraction of mass within one class of the diagonal; classes must be
    /// ordered for this to mean anything (age groups are).
    pub fn adjacent_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let mut band = 0u64;
        for i in 0..self.k {
            for j in 0..self.k {
                if i.abs_diff(j) <= 1 {
                    band += self.at(i, j);
                }
            }
        }
        band as f64 / total as f64
    }

    /// K x K CSV grid (no header), rows = true class.
    pub fn to_csv(&self) -> String {
        (0..self.k)
            .map(|i| {
                (0..self.k)
                    .map(|j| self.at(i, j).to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Count (true, predicted) pairs into a K x K grid.
pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::Invalid(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(EvalError::LabelOutOfRange {
                label: t.max(p),
                classes: k,
            });
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = vec![0, 1, 2, 1, 0, 2, 2];
        let cm = confusion(&labels, &labels, 3).unwrap();
        assert_eq!(cm.accuracy().unwrap(), 1.0);
        assert!(cm.f1_scores().iter().all(|&f| f == 1.0));
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.at(i, j), 0);
                }
            }
        }
    }

    #[test]
    fn empty_input_gives_zero_matrix_and_metric_error() {
        let cm = confusion(&[], &[], 4).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.accuracy(), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        assert!(matches!(
            confusion(&[0, 3], &[1, 1], 3).unwrap_err(),
            EvalError::LabelOutOfRange { label: 3, classes: 3 }
        ));
    }

    #[test]
    fn random_case_matches_counting_oracle() {
        let mut rng = crate::rng::RngState::new(8).stream();
        let truth: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let pred: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
        let cm = confusion(&truth, &pred, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let direct = truth
                    .iter()
                    .zip(&pred)
                    .filter(|&(&t, &p)| t == i && p == j)
                    .count() as u64;
                assert_eq!(cm.at(i, j), direct);
            }
        }
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn binary_accuracy_matches_tp_tn_formula() {
        // TP=3, TN=5, FP=1, FN=1 with positive class 1:
        // counts[1][1]=3, counts[0][0]=5, counts[0][1]=1, counts[1][0]=1.
        let cm = ConfusionMatrix::from_counts(2, vec![5, 1, 1, 3]).unwrap();
        let (tp, tn, fp, fn_) = (3.0, 5.0, 1.0, 1.0);
        let formula = (tn + tp) / (tn + fp + tp + fn_);
        assert_eq!(cm.accuracy().unwrap(), formula);
        assert_eq!(cm.accuracy().unwrap(), 0.8);
    }

    #[test]
    fn accuracy_matches_trace_oracle_on_random_matrices() {
        let mut rng = crate::rng::RngState::new(9).stream();
        for _ in 0..50 {
            let counts: Vec<u64> = (0..16).map(|_| rng.random_range(0..50)).collect();
            let cm = ConfusionMatrix::from_counts(4, counts.clone()).unwrap();
            let trace: u64 = (0..4).map(|i| counts[i * 4 + i]).sum();
            let total: u64 = counts.iter().sum();
            if total == 0 {
                continue;
            }
            assert_eq!(cm.accuracy().unwrap(), trace as f64 / total as f64);
        }
    }

    #[test]
    fn f1_degenerate_class_is_zero() {
        // Class 2 never present and never predicted.
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        let f1 = cm.f1_scores();
        assert_eq!(f1[2], 0.0);
    }

    #[test]
    fn f1_matches_scalar_oracle_on_hand_matrix() {
        // 3 classes, hand-built counts.
        let cm = ConfusionMatrix::from_counts(3, vec![10, 2, 1, 3, 8, 2, 0, 1, 6]).unwrap();
        let f1 = cm.f1_scores();
        // Class 0: P = 10/13, R = 10/13.
        let p0: f64 = 10.0 / 13.0;
        assert!((f1[0] - 2.0 * p0 * p0 / (p0 + p0)).abs() < 1e-12);
        // Class 1: P = 8/11, R = 8/13.
        let (p1, r1): (f64, f64) = (8.0 / 11.0, 8.0 / 13.0);
        assert!((f1[1] - 2.0 * p1 * r1 / (p1 + r1)).abs() < 1e-12);
        // Class 2: P = 6/9, R = 6/7.
        let (p2, r2): (f64, f64) = (6.0 / 9.0, 6.0 / 7.0);
        assert!((f1[2] - 2.0 * p2 * r2 / (p2 + r2)).abs() < 1e-12);
    }

    #[test]
    fn f1_is_harmonic_mean_when_both_positive() {
        let mut rng = crate::rng::RngState::new(10).stream();
        for _ in 0..20 {
            let counts: Vec<u64> = (0..9).map(|_| rng.random_range(1..30)).collect();
            let cm = ConfusionMatrix::from_counts(3, counts).unwrap();
            for class in 0..3 {
                let tp = cm.at(class, class) as f64;
                let col: u64 = (0..3).map(|i| cm.at(i, class)).sum();
                let row: u64 = (0..3).map(|j| cm.at(class, j)).sum();
                let p = tp / col as f64;
                let r = tp / row as f64;
                if p > 0.0 && r > 0.0 {
                    let harmonic = 2.0 / (1.0 / p + 1.0 / r);
                    assert!((cm.f1_scores()[class] - harmonic).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjacent_accuracy_cases() {
        let diag = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(diag.adjacent_accuracy(), 1.0);
        // All mass exactly one off the diagonal.
        let off = confusion(&[0, 1, 2], &[1, 2, 1], 3).unwrap();
        assert_eq!(off.adjacent_accuracy(), 1.0);
        assert!(off.accuracy().unwrap() < 1.0);
    }

    #[test]
    fn adjacent_matches_banded_sum_oracle_and_dominates_accuracy() {
        let mut rng = crate::rng::RngState::new(11).stream();
        for _ in 0..1000 {
            let k = rng.random_range(2..8usize);
            let counts: Vec<u64> = (0..k * k).map(|_| rng.random_range(0..20)).collect();
            let cm = ConfusionMatrix::from_counts(k, counts.clone()).unwrap();
            if cm.total() == 0 {
                continue;
            }
            let mut band = 0u64;
            for i in 0..k {
                for j in 0..k {
                    if i.abs_diff(j) <= 1 {
                        band += counts[i * k + j];
                    }
                }
            }
            let adj = cm.adjacent_accuracy();
            assert!((adj - band as f64 / cm.total() as f64).abs() < 1e-12);
            assert!(adj >= cm.accuracy().unwrap());
        }
    }
}
