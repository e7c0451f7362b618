//! Relative pose from correspondences: normalized 8-point essential matrix
//! inside a seeded robust-sampling loop, followed by cheirality selection.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SemError};
use crate::geometry::{CameraModel, Correspondence, RelativePose};

const MIN_MATCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    /// Robust-sampling iterations.
    pub iterations: usize,
    /// Inlier threshold on the Sampson distance, in normalized camera coordinates.
    pub inlier_threshold: f64,
    /// Matches below this confidence are ignored.
    pub min_confidence: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 1e-3,
            min_confidence: 0.0,
        }
    }
}

/// Estimates the reference-to-source pose from pixel correspondences.
///
/// Deterministic for a fixed `seed`. The returned translation is unit length.
pub fn estimate_pose(
    matches: &[Correspondence],
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    config: &PoseConfig,
    seed: u64,
) -> Result<RelativePose> {
    let (x1, x2): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = matches
        .iter()
        .filter(|m| m.confidence >= config.min_confidence)
        .map(|m| (cam_ref.unproject(&m.ref_pt), cam_src.unproject(&m.src_pt)))
        .unzip();
    let n = x1.len();
    if n < MIN_MATCHES {
        return Err(SemError::InsufficientMatches {
            found: n,
            required: MIN_MATCHES,
        });
    }

    let all: Vec<usize> = (0..n).collect();
    let th = config.inlier_threshold;
    let mut best: Option<(Matrix3<f64>, f64)> = None;
    if n == MIN_MATCHES {
        if let Some(e) = eight_point(&x1, &x2, &all) {
            best = Some((e, msac_cost(&e, &x1, &x2, th)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..config.iterations {
            let sample = rand::seq::index::sample(&mut rng, n, MIN_MATCHES).into_vec();
            let Some(e) = eight_point(&x1, &x2, &sample) else {
                continue;
            };
            let cost = msac_cost(&e, &x1, &x2, th);
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((e, cost));
            }
        }
    }

    let (mut essential, mut cost) = best.ok_or(SemError::DegenerateConfiguration)?;
    let mut support = inliers(&essential, &x1, &x2, th);
    // Least-squares refits on the consensus set, kept while the cost drops.
    for _ in 0..2 {
        if support.len() < MIN_MATCHES {
            break;
        }
        let Some(refit) = eight_point(&x1, &x2, &support) else {
            break;
        };
        let refit_cost = msac_cost(&refit, &x1, &x2, th);
        if refit_cost >= cost {
            break;
        }
        essential = refit;
        cost = refit_cost;
        support = inliers(&essential, &x1, &x2, th);
    }
    if support.len() < MIN_MATCHES {
        support = all;
    }
    decompose(&essential, &x1, &x2, &support)
}

/// First-order geometric (Sampson) distance of a normalized correspondence.
pub fn sampson_distance(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Truncated quadratic (MSAC) cost of a model over all correspondences.
fn msac_cost(e: &Matrix3<f64>, x1: &[Vector3<f64>], x2: &[Vector3<f64>], threshold: f64) -> f64 {
    let t2 = threshold * threshold;
    (0..x1.len())
        .map(|i| sampson_distance(e, &x1[i], &x2[i]).powi(2).min(t2))
        .sum()
}

fn inliers(e: &Matrix3<f64>, x1: &[Vector3<f64>], x2: &[Vector3<f64>], threshold: f64) -> Vec<usize> {
    (0..x1.len())
        .filter(|&i| sampson_distance(e, &x1[i], &x2[i]) <= threshold)
        .collect()
}

/// Isotropic conditioning: centroid to the origin, mean distance sqrt(2).
fn conditioning(points: &[Vector3<f64>], idx: &[usize]) -> Matrix3<f64> {
    let n = idx.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &i in idx {
        mx += points[i].x;
        my += points[i].y;
    }
    mx /= n;
    my /= n;
    let mean_dist = idx
        .iter()
        .map(|&i| (points[i].x - mx).hypot(points[i].y - my))
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-15 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate of the essential matrix from the given subset.
fn eight_point(x1: &[Vector3<f64>], x2: &[Vector3<f64>], idx: &[usize]) -> Option<Matrix3<f64>> {
    let t1 = conditioning(x1, idx);
    let t2 = conditioning(x2, idx);
    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = idx.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (r, &i) in idx.iter().enumerate() {
        let p = t1 * x1[i];
        let q = t2 * x2[i];
        let row = [q.x * p.x, q.x * p.y, q.x, q.y * p.x, q.y * p.y, q.y, p.x, p.y, 1.0];
        for (c, v) in row.iter().enumerate() {
            a[(r, c)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let f = v_t.row(min_idx);
    let e_cond = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let e = t2.transpose() * e_cond * t1;
    let e = project_to_essential(&e)?;
    e.iter().all(|v| v.is_finite()).then_some(e)
}

/// Closest essential matrix: equal leading singular values, zero third.
fn project_to_essential(e: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let s = svd.singular_values;
    let sigma = 0.5 * (s[0] + s[1]);
    if !(sigma > 0.0) {
        return None;
    }
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    Some(u * d * v_t)
}

/// Linear triangulation with `P1 = [I | 0]` and `P2 = [R | t]`; returns the
/// point in the reference frame.
fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> Option<Vector3<f64>> {
    let mut a = nalgebra::Matrix4::<f64>::zeros();
    // Rows from x1 cross P1 X = 0.
    a.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, x1.x, 0.0));
    a.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, x1.y, 0.0));
    let p2_row = |k: usize| nalgebra::RowVector4::new(r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k]);
    a.set_row(2, &(x2.x * p2_row(2) - p2_row(0)));
    a.set_row(3, &(x2.y * p2_row(2) - p2_row(1)));
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-15 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Picks the decomposition of `e` that places most points in front of both cameras.
fn decompose(e: &Matrix3<f64>, x1: &[Vector3<f64>], x2: &[Vector3<f64>], support: &[usize]) -> Result<RelativePose> {
    let svd = e.svd(true, true);
    let (Some(mut u), Some(mut v_t)) = (svd.u, svd.v_t) else {
        return Err(SemError::DegenerateConfiguration);
    };
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];

    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, t) in candidates {
        let in_front = support
            .iter()
            .filter(|&&i| triangulate(&r, &t, &x1[i], &x2[i]).is_some_and(|p| p.z > 0.0 && (r * p + t).z > 0.0))
            .count();
        if best.as_ref().is_none_or(|(count, _, _)| in_front > *count) {
            best = Some((in_front, r, t));
        }
    }
    match best {
        Some((count, r, t)) if 2 * count > support.len() => RelativePose::new(r, t),
        _ => Err(SemError::DegenerateConfiguration),
    }
}
