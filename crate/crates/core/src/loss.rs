//! Evaluation-only objectives for the coarse matrices and fine refinement.

use std::collections::HashMap;

use nalgebra::{DMatrix, Point2};

use crate::error::{Result, SemError};
use crate::matching::MatchSet;
use crate::pipeline::IterationTrace;

/// Floor applied before taking logarithms of matching probabilities.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor applied to refinement variances.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Negative mean log-probability of the ground-truth cells, summed over
/// matrices.
pub fn coarse_loss_matrices(matrices: &[&DMatrix<f64>], gt: &[(usize, usize)]) -> Result<f64> {
    if gt.is_empty() {
        return Err(SemError::EmptyGroundTruth);
    }
    let mut total = 0.0;
    for m in matrices {
        if let Some(&(i, j)) = gt.iter().find(|(i, j)| *i >= m.nrows() || *j >= m.ncols()) {
            return Err(SemError::ShapeMismatch(format!(
                "ground-truth pair ({i}, {j}) outside a {}x{} matrix",
                m.nrows(),
                m.ncols()
            )));
        }
        let sum: f64 = gt.iter().map(|&(i, j)| m[(i, j)].max(LOG_FLOOR).ln()).sum();
        total -= sum / gt.len() as f64;
    }
    Ok(total)
}

/// Coarse loss over every iterate of a trace.
pub fn coarse_loss(trace: &IterationTrace, gt: &[(usize, usize)]) -> Result<f64> {
    let ms: Vec<&DMatrix<f64>> = trace.records.iter().map(|r| &r.matrix.scores).collect();
    coarse_loss_matrices(&ms, gt)
}

/// Gradient of the single-matrix coarse loss with respect to the similarity
/// matrix feeding an unrestricted dual softmax. Assumes no GT entry hits the
/// log floor.
pub fn coarse_loss_gradient(sim: &DMatrix<f64>, gt: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    if gt.is_empty() {
        return Err(SemError::EmptyGroundTruth);
    }
    let (n, m) = sim.shape();
    let mut row = sim.clone();
    for i in 0..n {
        let max = sim.row(i).max();
        let mut total = 0.0;
        for j in 0..m {
            row[(i, j)] = (sim[(i, j)] - max).exp();
            total += row[(i, j)];
        }
        for j in 0..m {
            row[(i, j)] /= total;
        }
    }
    let mut col = sim.clone();
    for j in 0..m {
        let max = sim.column(j).max();
        let mut total = 0.0;
        for i in 0..n {
            col[(i, j)] = (sim[(i, j)] - max).exp();
            total += col[(i, j)];
        }
        for i in 0..n {
            col[(i, j)] /= total;
        }
    }
    // d log R(a,b) / dS(a,j) = [j = b] - R(a,j); d log C(a,b) / dS(i,b) = [i = a] - C(i,b).
    let mut grad = DMatrix::zeros(n, m);
    let w = -1.0 / gt.len() as f64;
    for &(a, b) in gt {
        if a >= n || b >= m {
            return Err(SemError::ShapeMismatch(format!(
                "ground-truth pair ({a}, {b}) outside a {n}x{m} matrix"
            )));
        }
        for j in 0..m {
            grad[(a, j)] += w * (f64::from(u8::from(j == b)) - row[(a, j)]);
        }
        for i in 0..n {
            grad[(i, b)] += w * (f64::from(u8::from(i == a)) - col[(i, b)]);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FineNorm {
    /// Plain Euclidean distance.
    #[default]
    Distance,
    /// Squared Euclidean distance.
    Squared,
}

/// Inverse-variance weighted refinement error, averaged over the ground
/// truth. Matches whose reference cell has no ground truth are skipped.
pub fn fine_loss(matches: &MatchSet, gt_fine: &HashMap<usize, Point2<f64>>, norm: FineNorm) -> Result<f64> {
    if gt_fine.is_empty() {
        return Err(SemError::EmptyGroundTruth);
    }
    let mut total = 0.0;
    for m in &matches.matches {
        let Some(target) = gt_fine.get(&m.ref_index) else {
            continue;
        };
        let d = (m.src_pt - target).norm();
        let e = match norm {
            FineNorm::Distance => d,
            FineNorm::Squared => d * d,
        };
        total += e / m.sigma2.max(SIGMA2_FLOOR);
    }
    Ok(total / gt_fine.len() as f64)
}

pub fn total_loss(coarse: f64, fine: f64) -> f64 {
    coarse + fine
}
