use nalgebra::{DMatrix, Point2};
use proptest::prelude::*;

use sem_core::features::FeatureMap;
use sem_core::geometry::{band_mask, epipolar_band, CameraModel, RelativePose};
use sem_core::io::{format_matches, parse_matches, read_features, write_features, MatchRow};
use sem_core::loss::coarse_loss_matrices;
use sem_core::matching::{dual_softmax, dual_softmax_scores, extract_matches, MatchMatrix};
use sem_core::metrics::{cell_metrics, pose_auc};
use sem_core::structured::structured_feature;

fn point() -> impl Strategy<Value = Point2<f64>> {
    (-100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y)| Point2::new(x, y))
}

fn anchors() -> impl Strategy<Value = Vec<Point2<f64>>> {
    prop::collection::vec(point(), 1..16)
}

fn feature_map(h: usize, w: usize, c: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-1.0..1.0f64, h * w * c).prop_map(move |d| FeatureMap::new(h, w, c, 8, d).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn structured_feature_ignores_translation(p in point(), a in anchors(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let shift = nalgebra::Vector2::new(dx, dy);
        let moved: Vec<_> = a.iter().map(|q| q + shift).collect();
        let f = structured_feature(&p, &a);
        let g = structured_feature(&(p + shift), &moved);
        prop_assert!(close(&f.values, &g.values, 1e-9));
    }

    #[test]
    fn structured_blocks_have_unit_l1_norm(p in point(), a in anchors()) {
        let f = structured_feature(&p, &a);
        for block in [f.dx(), f.dy(), f.dist()] {
            let l1: f64 = block.iter().map(|v| v.abs()).sum();
            prop_assert!(l1 <= 1.0 + 1e-12);
            prop_assert!(l1 == 0.0 || (l1 - 1.0).abs() < 1e-9 || l1 < 1e-6);
        }
        prop_assert!(f.dist().iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn scaling_keeps_structured_feature(p in point(), a in anchors(), s in 0.1..10.0f64) {
        let scaled: Vec<_> = a.iter().map(|q| Point2::from(q.coords * s)).collect();
        let f = structured_feature(&p, &a);
        let g = structured_feature(&Point2::from(p.coords * s), &scaled);
        prop_assert!(close(&f.values, &g.values, 1e-9));
    }

    #[test]
    fn wider_bands_contain_narrower_ones(
        px in 0.0..32.0f64, py in 0.0..32.0f64,
        tx in -1.0..1.0f64, ty in -1.0..1.0f64,
        s0 in 0.1..5.0f64, extra in 0.0..5.0f64,
    ) {
        let cam = CameraModel::new(30.0, 30.0, 16.0, 16.0, 32, 32).unwrap();
        prop_assume!(tx.hypot(ty) > 0.05);
        let pose = RelativePose::identity_rotation(nalgebra::Vector3::new(tx, ty, 0.3).normalize()).unwrap();
        let p = Point2::new(px, py);
        let narrow = band_mask(&epipolar_band(&cam, &cam, &pose, &p, s0), 32, 32);
        let wide = band_mask(&epipolar_band(&cam, &cam, &pose, &p, s0 + extra), 32, 32);
        prop_assert!(narrow.iter().zip(&wide).all(|(n, w)| !n || *w));
    }

    #[test]
    fn dual_softmax_is_substochastic(a in feature_map(2, 3, 4), b in feature_map(3, 2, 4), tau in 0.1..20.0f64) {
        let m = dual_softmax(&a, &b, tau).unwrap();
        prop_assert!(m.scores.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for i in 0..m.rows() {
            prop_assert!(m.scores.row(i).sum() <= 1.0 + 1e-12);
        }
        for j in 0..m.cols() {
            prop_assert!(m.scores.column(j).sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn dual_softmax_commutes_with_row_permutations(
        s in prop::collection::vec(-3.0..3.0f64, 30),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let sim = DMatrix::from_row_slice(5, 6, &s);
        let permuted = DMatrix::from_fn(5, 6, |i, j| sim[(perm[i], j)]);
        let a = dual_softmax_scores(&sim, None);
        let b = dual_softmax_scores(&permuted, None);
        for i in 0..5 {
            for j in 0..6 {
                prop_assert!((b[(i, j)] - a[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_softmax_of_transpose_is_transpose(s in prop::collection::vec(-3.0..3.0f64, 12)) {
        let sim = DMatrix::from_row_slice(3, 4, &s);
        let a = dual_softmax_scores(&sim, None);
        let b = dual_softmax_scores(&sim.transpose(), None);
        prop_assert!((a.transpose() - b).abs().max() < 1e-12);
    }

    #[test]
    fn mutual_neighbours_are_symmetric(s in prop::collection::vec(0.0..1.0f64, 20), theta in 0.0..0.5f64) {
        let m = MatchMatrix {
            scores: DMatrix::from_row_slice(4, 5, &s),
            ref_dims: (2, 2),
            src_dims: (5, 1),
            temperature: 1.0,
            scale: 8,
        };
        let mut forward = extract_matches(&m, theta).pairs();
        let mut backward: Vec<_> = extract_matches(&m.transpose(), theta).pairs().into_iter().map(|(a, b)| (b, a)).collect();
        forward.sort_unstable();
        backward.sort_unstable();
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn semf_round_trip(m in (1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(h, w, c)| feature_map(h, w, c))) {
        let mut buf = Vec::new();
        write_features(&m, &mut buf).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        let quantized: Vec<f64> = m.data.iter().map(|&v| f64::from(v as f32)).collect();
        prop_assert_eq!((back.height, back.width, back.channels, back.scale), (m.height, m.width, m.channels, m.scale));
        prop_assert_eq!(&back.data, &quantized);
        let mut again = Vec::new();
        write_features(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn match_tsv_is_stable_after_one_pass(vals in prop::collection::vec((-1e4..1e4f64, -1e4..1e4f64, 0.0..1.0f64, 0.0..10.0f64), 0..8)) {
        let rows: Vec<MatchRow> = vals
            .iter()
            .map(|&(x, y, c, s)| MatchRow { ref_pt: Point2::new(x, y), src_pt: Point2::new(y, x), confidence: c, sigma2: s })
            .collect();
        let text = format_matches(&rows);
        let parsed = parse_matches(&text).unwrap();
        prop_assert_eq!(parsed.len(), rows.len());
        for (p, r) in parsed.iter().zip(&rows) {
            prop_assert!((p.ref_pt - r.ref_pt).norm() <= 1e-5 * r.ref_pt.coords.norm().max(1e-3));
            prop_assert!((p.confidence - r.confidence).abs() <= 1e-5);
        }
        prop_assert_eq!(format_matches(&parsed), text);
    }

    #[test]
    fn coarse_loss_is_nonnegative(s in prop::collection::vec(-5.0..5.0f64, 16), gi in 0usize..4, gj in 0usize..4) {
        let p = dual_softmax_scores(&DMatrix::from_row_slice(4, 4, &s), None);
        prop_assert!(coarse_loss_matrices(&[&p], &[(gi, gj)]).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        pred in prop::collection::vec((0usize..6, 0usize..6), 0..20),
        gt in prop::collection::vec((0usize..6, 0usize..6), 1..20),
    ) {
        let m = cell_metrics(&pred, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.precision));
        prop_assert!((0.0..=1.0).contains(&m.recall));
        prop_assert!(m.true_positives <= m.predicted.min(m.ground_truth));
    }

    #[test]
    fn pose_auc_is_bounded_and_monotone(errors in prop::collection::vec(0.0..40.0f64, 1..20)) {
        let auc = pose_auc(&errors, &[5.0, 10.0, 20.0]);
        prop_assert!(auc.iter().all(|a| (0.0..=1.0).contains(a)));
        prop_assert!(auc.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}
