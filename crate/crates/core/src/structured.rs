//! Anchor-relative structured features.
//!
//! Confident correspondences from the matching matrix become anchors; every
//! cell is then described by its L1-normalized coordinate differences and
//! distances to those anchors, and that description is fused into the
//! appearance features by a residual MLP.

use nalgebra::{DMatrix, Point2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SemError};
use crate::features::FeatureMap;
use crate::matching::MatchMatrix;
use crate::params::{Mlp, ParamStore};

/// Added to every L1 denominator; an all-zero block stays all zero.
pub const L1_EPSILON: f64 = 1e-12;

/// Paired anchor coordinates in grid units, `ref_anchors[k] <-> src_anchors[k]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorSet {
    pub ref_anchors: Vec<Point2<f64>>,
    pub src_anchors: Vec<Point2<f64>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.ref_anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ref_anchors.is_empty()
    }
}

/// Confidence of reference cell `i`: the largest score in its row.
pub fn confidence(m: &MatchMatrix, i: usize) -> f64 {
    m.scores.row(i).iter().copied().fold(0.0, f64::max)
}

fn grid_point(index: usize, width: usize) -> Point2<f64> {
    Point2::new((index % width) as f64, (index / width) as f64)
}

/// Samples up to `count` anchors among the row-argmax pairs whose score
/// reaches `threshold`. Fewer qualifying pairs are all kept; none yields an
/// empty set.
pub fn select_anchors(m: &MatchMatrix, threshold: f64, count: usize, seed: u64) -> AnchorSet {
    let qualifying: Vec<(usize, usize)> = (0..m.rows())
        .filter_map(|i| {
            let (j, v) = m.row_argmax(i);
            (v >= threshold).then_some((i, j))
        })
        .collect();
    let chosen: Vec<(usize, usize)> = if qualifying.len() > count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = rand::seq::index::sample(&mut rng, qualifying.len(), count).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| qualifying[k]).collect()
    } else {
        qualifying
    };
    AnchorSet {
        ref_anchors: chosen.iter().map(|&(i, _)| grid_point(i, m.ref_dims.0)).collect(),
        src_anchors: chosen.iter().map(|&(_, j)| grid_point(j, m.src_dims.0)).collect(),
    }
}

/// `dX || dY || D`, each block L1-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFeature {
    pub values: Vec<f64>,
}

impl StructuredFeature {
    pub fn anchors(&self) -> usize {
        self.values.len() / 3
    }

    pub fn dx(&self) -> &[f64] {
        &self.values[..self.anchors()]
    }

    pub fn dy(&self) -> &[f64] {
        let n = self.anchors();
        &self.values[n..2 * n]
    }

    pub fn dist(&self) -> &[f64] {
        let n = self.anchors();
        &self.values[2 * n..]
    }
}

fn l1_normalize(block: &mut [f64]) {
    let norm: f64 = block.iter().map(|v| v.abs()).sum::<f64>() + L1_EPSILON;
    block.iter_mut().for_each(|v| *v /= norm);
}

/// Structured feature of `point` with respect to one side's anchors.
pub fn structured_feature(point: &Point2<f64>, anchors: &[Point2<f64>]) -> StructuredFeature {
    let n = anchors.len();
    let mut values = vec![0.0; 3 * n];
    for (k, a) in anchors.iter().enumerate() {
        let dx = point.x - a.x;
        let dy = point.y - a.y;
        values[k] = dx;
        values[n + k] = dy;
        values[2 * n + k] = dx.hypot(dy);
    }
    for block in values.chunks_mut(n.max(1)) {
        l1_normalize(block);
    }
    StructuredFeature { values }
}

/// Structured features for every cell of a `width x height` grid, row-major.
pub fn structured_field(width: usize, height: usize, anchors: &[Point2<f64>]) -> Vec<StructuredFeature> {
    (0..height)
        .flat_map(|y| (0..width).map(move |x| Point2::new(x as f64, y as f64)))
        .map(|p| structured_feature(&p, anchors))
        .collect()
}

/// Residual MLP over `appearance || structured`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFusion {
    pub mlp: Mlp,
    pub max_anchors: usize,
}

impl StructuredFusion {
    pub fn load(store: &ParamStore, channels: usize, hidden: usize, max_anchors: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::load(store, "structured", channels + 3 * max_anchors, hidden, channels)?,
            max_anchors,
        })
    }
}

/// `f + MLP(f || f_sf)` per cell. Structured blocks shorter than the MLP's
/// anchor capacity are zero-padded block by block. An empty field (no
/// anchors) returns `f` unchanged.
pub fn fuse_structured(f: &FeatureMap, field: &[StructuredFeature], fusion: &StructuredFusion) -> Result<FeatureMap> {
    if field.is_empty() || field.iter().all(|sf| sf.values.is_empty()) {
        return Ok(f.clone());
    }
    if field.len() != f.cells() {
        return Err(SemError::ShapeMismatch(format!(
            "structured field has {} entries for {} cells",
            field.len(),
            f.cells()
        )));
    }
    let cap = fusion.max_anchors;
    let width = f.channels + 3 * cap;
    let n = field[0].anchors();
    if fusion.mlp.input_width() != width || fusion.mlp.w2.nrows() != f.channels || n > cap {
        return Err(SemError::ParamShapeMismatch {
            name: "structured.mlp1.weight".into(),
            expected: vec![fusion.mlp.w1.nrows(), f.channels + 3 * n.max(cap)],
            found: vec![fusion.mlp.w1.nrows(), fusion.mlp.input_width()],
        });
    }
    let mut input = DMatrix::zeros(f.cells(), width);
    for (i, sf) in field.iter().enumerate() {
        for (c, v) in f.cell(i).iter().enumerate() {
            input[(i, c)] = *v;
        }
        for b in 0..3 {
            for (k, v) in sf.values[b * n..(b + 1) * n].iter().enumerate() {
                input[(i, f.channels + b * cap + k)] = *v;
            }
        }
    }
    let delta = fusion.mlp.forward_rows(&input);
    let mut out = f.clone();
    for i in 0..f.cells() {
        for c in 0..f.channels {
            out.data[i * f.channels + c] += delta[(i, c)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelSpec;
    use nalgebra::DVector;
    use rand::Rng;

    fn mm(scores: DMatrix<f64>, w: usize) -> MatchMatrix {
        let h = scores.nrows() / w;
        MatchMatrix {
            ref_dims: (w, h),
            src_dims: (w, scores.ncols() / w),
            scores,
            temperature: 1.0,
            scale: 8,
        }
    }

    #[test]
    fn confidence_is_row_max() {
        let m = mm(DMatrix::from_row_slice(2, 3, &[0.1, 0.7, 0.2, 0.0, 0.0, 0.0]), 1);
        assert_eq!(confidence(&m, 0), 0.7);
        assert_eq!(confidence(&m, 1), 0.0);
    }

    #[test]
    fn under_supplied_anchors_are_all_kept() {
        let mut s = DMatrix::from_element(64, 64, 0.01);
        for i in [3, 10, 20, 40, 63] {
            s[(i, 63 - i)] = 0.9;
        }
        let anchors = select_anchors(&mm(s, 8), 0.5, 32, 1);
        assert_eq!(anchors.len(), 5);
        assert_eq!(anchors.ref_anchors[0], Point2::new(3.0, 0.0));
        assert_eq!(anchors.src_anchors[0], Point2::new(4.0, 7.0));
    }

    #[test]
    fn oversupplied_anchors_are_sampled_repeatably() {
        let m = mm(DMatrix::identity(64, 64), 8);
        let a = select_anchors(&m, 0.5, 32, 7);
        let b = select_anchors(&m, 0.5, 32, 7);
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
        assert_eq!(a.ref_anchors, a.src_anchors);
        assert_ne!(a, select_anchors(&m, 0.5, 32, 8));
    }

    #[test]
    fn no_confident_rows_gives_empty_set() {
        let m = mm(DMatrix::from_element(16, 16, 0.3), 4);
        assert!(select_anchors(&m, 0.5, 32, 0).is_empty());
    }

    #[test]
    fn single_anchor_feature() {
        let sf = structured_feature(&Point2::new(3.0, 4.0), &[Point2::new(0.0, 0.0)]);
        for v in &sf.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_anchor_gives_zero_blocks() {
        let sf = structured_feature(&Point2::new(2.0, 2.0), &[Point2::new(2.0, 2.0)]);
        assert_eq!(sf.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_anchor_hand_evaluation() {
        let sf = structured_feature(&Point2::new(4.0, 0.0), &[Point2::new(0.0, 0.0), Point2::new(8.0, 0.0)]);
        let expect = [0.5, -0.5, 0.0, 0.0, 0.5, 0.5];
        for (v, e) in sf.values.iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        assert_eq!(sf.dx().len(), 2);
    }

    #[test]
    fn empty_anchors_skip_fusion() {
        let store = ParamStore::seeded(&ModelSpec::default(), 1, 1.0);
        let fusion = StructuredFusion::load(&store, 32, 64, 32).unwrap();
        let f = FeatureMap::new(2, 2, 32, 8, (0..128).map(|v| v as f64).collect()).unwrap();
        let field = structured_field(2, 2, &[]);
        assert_eq!(fuse_structured(&f, &field, &fusion).unwrap(), f);
        assert_eq!(fuse_structured(&f, &[], &fusion).unwrap(), f);
    }

    #[test]
    fn zero_weights_are_identity() {
        let store = ParamStore::zeros(&ModelSpec::default());
        let fusion = StructuredFusion::load(&store, 32, 64, 32).unwrap();
        let f = FeatureMap::new(2, 2, 32, 8, (0..128).map(|v| v as f64 * 0.1).collect()).unwrap();
        let field = structured_field(2, 2, &[Point2::new(0.0, 0.0), Point2::new(1.0, 1.0)]);
        assert_eq!(fuse_structured(&f, &field, &fusion).unwrap(), f);
    }

    #[test]
    fn fusion_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, hidden, cap) = (3, 4, 2);
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w1 = r(hidden * (c + 3 * cap));
        let b1 = r(hidden);
        let w2 = r(c * hidden);
        let b2 = r(c);
        let fdata = r(2 * 3 * c);
        let fusion = StructuredFusion {
            mlp: Mlp {
                w1: DMatrix::from_row_slice(hidden, c + 3 * cap, &w1),
                b1: DVector::from_column_slice(&b1),
                w2: DMatrix::from_row_slice(c, hidden, &w2),
                b2: DVector::from_column_slice(&b2),
            },
            max_anchors: cap,
        };
        let f = FeatureMap::new(2, 3, c, 8, fdata.clone()).unwrap();
        let anchors = [Point2::new(2.0, 1.0)];
        let field = structured_field(3, 2, &anchors);
        let out = fuse_structured(&f, &field, &fusion).unwrap();

        for cell in 0..6 {
            let (x, y) = ((cell % 3) as f64, (cell / 3) as f64);
            let (dx, dy) = (x - 2.0, y - 1.0);
            let d = (dx * dx + dy * dy).sqrt();
            let n = |v: f64| v / (v.abs() + L1_EPSILON);
            // appearance, then padded blocks [dx, 0][dy, 0][d, 0]
            let mut input: Vec<f64> = fdata[cell * c..(cell + 1) * c].to_vec();
            input.extend([n(dx), 0.0, n(dy), 0.0, n(d), 0.0]);
            let mut h = vec![0.0; hidden];
            for (k, hk) in h.iter_mut().enumerate() {
                let mut acc = b1[k];
                for (t, v) in input.iter().enumerate() {
                    acc += w1[k * (c + 3 * cap) + t] * v;
                }
                *hk = acc.max(0.0);
            }
            for o in 0..c {
                let mut acc = b2[o] + fdata[cell * c + o];
                for (k, hk) in h.iter().enumerate() {
                    acc += w2[o * hidden + k] * hk;
                }
                assert!((out.data[cell * c + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_anchors_is_a_shape_error() {
        let store = ParamStore::zeros(&ModelSpec {
            max_anchors: 1,
            ..ModelSpec::default()
        });
        let fusion = StructuredFusion::load(&store, 32, 64, 1).unwrap();
        let f = FeatureMap::zeros(1, 2, 32, 8);
        let field = structured_field(2, 1, &[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]);
        assert!(matches!(
            fuse_structured(&f, &field, &fusion),
            Err(SemError::ParamShapeMismatch { .. })
        ));
    }
}
