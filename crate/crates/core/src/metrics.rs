//! Evaluation metrics: ground-truth cell precision/recall and pose-error AUC.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// True positives over predictions; 0 by convention when nothing was predicted.
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    pub empty_prediction: bool,
}

/// Scores predicted cell pairs against ground truth. Duplicates are counted once.
pub fn cell_metrics<T: Hash + Eq + Clone>(pred: &[T], gt: &[T]) -> Result<CellMetrics> {
    let gt: HashSet<T> = gt.iter().cloned().collect();
    if gt.is_empty() {
        return Err(SemError::EmptyGroundTruth);
    }
    let pred: HashSet<T> = pred.iter().cloned().collect();
    let tp = pred.iter().filter(|p| gt.contains(p)).count();
    Ok(CellMetrics {
        precision: if pred.is_empty() {
            0.0
        } else {
            tp as f64 / pred.len() as f64
        },
        recall: tp as f64 / gt.len() as f64,
        true_positives: tp,
        predicted: pred.len(),
        ground_truth: gt.len(),
        empty_prediction: pred.is_empty(),
    })
}

/// Precision alone, `None` for an empty prediction.
pub fn cell_precision<T: Hash + Eq>(pred: &[T], gt: &HashSet<T>) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    Some(pred.iter().filter(|p| gt.contains(p)).count() as f64 / pred.len() as f64)
}

/// Area under the cumulative pose-error curve up to each threshold,
/// normalized by the threshold. Errors are in degrees; non-finite errors
/// count as failures.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    if errors.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let mut errs: Vec<f64> = errors
        .iter()
        .map(|e| if e.is_finite() { *e } else { f64::INFINITY })
        .collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len() as f64;
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for (k, e) in errs.iter().enumerate() {
        xs.push(*e);
        ys.push((k + 1) as f64 / n);
    }
    thresholds
        .iter()
        .map(|&t| {
            let last = xs.partition_point(|&x| x < t);
            let mut ex: Vec<f64> = xs[..last].to_vec();
            let mut ry: Vec<f64> = ys[..last].to_vec();
            ex.push(t);
            ry.push(ys[last - 1]);
            let area: f64 = ex
                .windows(2)
                .zip(ry.windows(2))
                .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
                .sum();
            area / t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![(1, 2), (3, 4), (5, 6)];
        let m = cell_metrics(&gt, &gt).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 1.0));
        assert!(!m.empty_prediction);
    }

    #[test]
    fn empty_prediction_is_flagged() {
        let m = cell_metrics::<(usize, usize)>(&[], &[(1, 1)]).unwrap();
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        assert!(m.empty_prediction);
        assert!(matches!(
            cell_metrics::<(usize, usize)>(&[(1, 1)], &[]),
            Err(SemError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn partial_overlap() {
        let m = cell_metrics(&[(0, 0), (1, 1), (2, 9), (2, 9)], &[(0, 0), (1, 1), (2, 2), (3, 3)]).unwrap();
        assert_eq!(m.true_positives, 2);
        assert_eq!(m.predicted, 3);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn auc_of_zero_errors_is_one() {
        assert_eq!(pose_auc(&[0.0, 0.0], &[5.0, 10.0, 20.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn auc_matches_hand_integral() {
        // One error at 2 degrees: the curve is 0 up to 2 then 1, so the area
        // up to 5 is 1 * 2 / 2 (ramp) + 3 = 4, over 5.
        let auc = pose_auc(&[2.0], &[5.0]);
        assert!((auc[0] - 0.8).abs() < 1e-15);
        assert_eq!(pose_auc(&[f64::NAN], &[5.0]), vec![0.0]);
        assert_eq!(pose_auc(&[30.0], &[5.0]), vec![0.0]);
    }
}
