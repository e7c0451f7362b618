//! Iterative epipolar coarse matching and the full two-stage forward pass.

use crate::attention::{epipolar_cross_attention, self_cross_block, AttentionKind, AttentionParams, BlockParams};
use crate::error::{Result, SemError};
use crate::features::{extract_pyramid, fuse_scales, FeatureMap, FeaturePyramid, GrayImage, ScaleFusion};
use crate::geometry::{cell_center, grid_bands, CameraModel, Correspondence, EpipolarBand, RelativePose};
use crate::matching::{
    dual_softmax, epipolar_rewrite, extract_matches, refine_match, MatchMatrix, MatchSet, RefineConfig,
};
use crate::params::{ModelSpec, ParamStore};
use crate::pose::{estimate_pose, PoseConfig};
use crate::structured::{fuse_structured, select_anchors, structured_field, StructuredFusion};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Band half-width in coarse grid units.
    pub s0: f64,
    pub anchors: usize,
    /// Confidence needed for a row to feed anchors and pose estimation.
    /// Values of 1 or more disable both.
    pub sigma_h: f64,
    /// Extraction threshold for mutual nearest neighbours.
    pub theta: f64,
    pub iterations: usize,
    /// Multiplier on coarse inner products before the dual softmax.
    pub tau: f64,
    /// Multiplier on fine correlations in the refinement heatmap.
    pub fine_tau: f64,
    pub window: usize,
    pub seed: u64,
    pub use_anchors: bool,
    pub use_bands: bool,
    pub pose_iterations: usize,
    /// Sampson threshold in coarse cells; converted with the reference focal length.
    pub pose_threshold_cells: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            s0: 10.0,
            anchors: 32,
            sigma_h: 0.5,
            theta: 0.2,
            iterations: 4,
            tau: 20.0,
            fine_tau: 10.0,
            window: 5,
            seed: 0,
            use_anchors: true,
            use_bands: true,
            pose_iterations: 500,
            pose_threshold_cells: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SemError::InvalidConfig(msg));
        if !(self.s0 > 0.0) {
            return bad(format!("s0 must be positive, got {}", self.s0));
        }
        if self.anchors == 0 {
            return bad("anchor count must be at least 1".into());
        }
        if !(self.sigma_h > 0.0) {
            return bad(format!("sigma_h must be positive, got {}", self.sigma_h));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.fine_tau > 0.0 && self.fine_tau.is_finite()) {
            return bad("temperatures must be positive and finite".into());
        }
        if self.window.is_multiple_of(2) {
            return bad(format!("refinement window must be odd, got {}", self.window));
        }
        if self.pose_iterations == 0 || !(self.pose_threshold_cells > 0.0) {
            return bad("pose estimation needs iterations and a positive threshold".into());
        }
        Ok(())
    }
}

/// Every learned block the coarse stage uses, loaded once.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub fusion: ScaleFusion,
    pub init_global: BlockParams,
    pub init_coarse: BlockParams,
    pub iter_global: BlockParams,
    pub epipolar: AttentionParams,
    pub structured: StructuredFusion,
}

impl Model {
    pub fn new(store: ParamStore) -> Result<Self> {
        let spec = store.infer_spec()?;
        let (c, h, heads) = (spec.channels, spec.hidden, spec.heads);
        Ok(Self {
            fusion: ScaleFusion::load(&store, c)?,
            init_global: BlockParams::load(&store, "coarse32.init", c, h, heads)?,
            init_coarse: BlockParams::load(&store, "coarse8.init", c, h, heads)?,
            iter_global: BlockParams::load(&store, "coarse32.iter", c, h, heads)?,
            epipolar: AttentionParams::load(&store, "coarse8.epipolar", c, h, heads)?,
            structured: StructuredFusion::load(&store, c, h, spec.max_anchors)?,
            spec,
            store,
        })
    }
}

/// Coarse maps of both views as they evolve through the iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseState {
    pub ref8: FeatureMap,
    pub src8: FeatureMap,
    pub ref32: FeatureMap,
    pub src32: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub matrix: MatchMatrix,
    pub pose: Option<RelativePose>,
    pub anchors: usize,
    /// Fraction of valid bands over both directions; zero when no bands were built.
    pub band_validity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub config: PipelineConfig,
    pub records: Vec<IterationRecord>,
}

/// Initial self-and-cross blocks (vanilla on 1/32, linear on 1/8) followed by
/// one round of cross-scale fusion.
pub fn initialize(ref_pyr: &FeaturePyramid, src_pyr: &FeaturePyramid, model: &Model) -> Result<CoarseState> {
    ref_pyr.validate()?;
    src_pyr.validate()?;
    let (r32, s32) = self_cross_block(
        &ref_pyr.global,
        &src_pyr.global,
        &model.init_global,
        AttentionKind::Vanilla,
        None,
    )?;
    let (r8, s8) = self_cross_block(
        &ref_pyr.coarse,
        &src_pyr.coarse,
        &model.init_coarse,
        AttentionKind::Linear,
        None,
    )?;
    let (ref8, ref32) = fuse_scales(&r8, &r32, &model.fusion)?;
    let (src8, src32) = fuse_scales(&s8, &s32, &model.fusion)?;
    Ok(CoarseState {
        ref8,
        src8,
        ref32,
        src32,
    })
}

/// Row-argmax pairs at or above `threshold`, as pixel-center correspondences.
fn confident_pairs(m: &MatchMatrix, threshold: f64) -> Vec<Correspondence> {
    let (rw, sw) = (m.ref_dims.0, m.src_dims.0);
    (0..m.rows())
        .filter_map(|i| {
            let (j, v) = m.row_argmax(i);
            (v >= threshold).then(|| {
                Correspondence::new(
                    cell_center(i % rw, i / rw, m.scale),
                    cell_center(j % sw, j / sw, m.scale),
                    v,
                )
            })
        })
        .collect()
}

type Bands = (Vec<EpipolarBand>, Vec<EpipolarBand>);

fn invalid_bands(state: &CoarseState, tol: f64) -> Bands {
    (
        vec![EpipolarBand::invalid(tol); state.ref8.cells()],
        vec![EpipolarBand::invalid(tol); state.src8.cells()],
    )
}

fn build_bands(
    m: &MatchMatrix,
    cams: (&CameraModel, &CameraModel),
    cfg: &PipelineConfig,
    k: usize,
) -> Option<(RelativePose, Bands)> {
    let (cam_ref, cam_src) = cams;
    let matches = confident_pairs(m, cfg.sigma_h);
    let pose_cfg = PoseConfig {
        iterations: cfg.pose_iterations,
        inlier_threshold: cfg.pose_threshold_cells * m.scale as f64 / (0.5 * (cam_ref.fx + cam_ref.fy)),
        min_confidence: 0.0,
    };
    let pose = estimate_pose(&matches, cam_ref, cam_src, &pose_cfg, cfg.seed.wrapping_add(k as u64)).ok()?;
    let bands_ref = grid_bands(cam_ref, cam_src, &pose, m.scale, cfg.s0);
    let bands_src = grid_bands(cam_src, cam_ref, &pose.inverse(), m.scale, cfg.s0);
    Some((pose, (bands_ref, bands_src)))
}

/// Runs the iterative coarse stage and returns the final matching matrix.
///
/// Each iteration: 1/32 self-and-cross attention, matching (global on the
/// first pass, band-restricted afterwards), anchor fusion, pose and band
/// estimation, epipolar cross attention both ways, cross-scale fusion.
pub fn coarse_match(
    state: &CoarseState,
    cams: (&CameraModel, &CameraModel),
    cfg: &PipelineConfig,
    model: &Model,
) -> Result<(MatchMatrix, IterationTrace)> {
    cfg.validate()?;
    let mut s = state.clone();
    let mut bands: Option<Bands> = None;
    let mut records = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let (r32, s32) = self_cross_block(&s.ref32, &s.src32, &model.iter_global, AttentionKind::Vanilla, None)?;
        s.ref32 = r32;
        s.src32 = s32;

        let m = match &bands {
            None => dual_softmax(&s.ref8, &s.src8, cfg.tau)?,
            Some((br, bs)) => epipolar_rewrite(&s.ref8, &s.src8, br, bs, cfg.tau)?,
        };

        let mut anchor_count = 0;
        if cfg.use_anchors {
            let anchors = select_anchors(&m, cfg.sigma_h, cfg.anchors, cfg.seed.wrapping_add(k as u64));
            anchor_count = anchors.len();
            if !anchors.is_empty() {
                let fr = structured_field(s.ref8.width, s.ref8.height, &anchors.ref_anchors);
                let fs = structured_field(s.src8.width, s.src8.height, &anchors.src_anchors);
                s.ref8 = fuse_structured(&s.ref8, &fr, &model.structured)?;
                s.src8 = fuse_structured(&s.src8, &fs, &model.structured)?;
            }
        }

        let estimated = if cfg.use_bands {
            build_bands(&m, cams, cfg, k)
        } else {
            None
        };
        let (pose, current) = match estimated {
            Some((pose, b)) => (Some(pose), b),
            None => (None, invalid_bands(&s, cfg.s0)),
        };
        let total = current.0.len() + current.1.len();
        let valid = current.0.iter().chain(&current.1).filter(|b| b.valid).count();
        let band_validity = if total == 0 { 0.0 } else { valid as f64 / total as f64 };

        let r8 = epipolar_cross_attention(&s.ref8, &s.src8, &current.0, &model.epipolar)?;
        let s8 = epipolar_cross_attention(&s.src8, &s.ref8, &current.1, &model.epipolar)?;
        let (ref8, ref32) = fuse_scales(&r8, &s.ref32, &model.fusion)?;
        let (src8, src32) = fuse_scales(&s8, &s.src32, &model.fusion)?;
        s = CoarseState {
            ref8,
            src8,
            ref32,
            src32,
        };

        bands = Some(current);
        records.push(IterationRecord {
            matrix: m,
            pose,
            anchors: anchor_count,
            band_validity,
        });
    }
    let last = records.last().expect("at least one iteration").matrix.clone();
    Ok((last, IterationTrace { config: *cfg, records }))
}

/// One view handed to [`sem_forward`].
#[derive(Debug, Clone, Copy)]
pub enum ViewInput<'a> {
    Image(&'a GrayImage),
    Features(&'a FeaturePyramid),
}

fn l2_normalize_cells(f: &mut FeatureMap) {
    for cell in f.data.chunks_mut(f.channels.max(1)) {
        let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            cell.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Feature pyramid for one view. Backbone outputs are L2-normalized per cell
/// so the temperatures mean the same thing for images and feature files.
pub fn prepare_view(view: ViewInput<'_>, model: &Model) -> Result<FeaturePyramid> {
    match view {
        ViewInput::Features(p) => {
            p.validate()?;
            Ok(p.clone())
        }
        ViewInput::Image(img) => {
            let mut p = extract_pyramid(img, &model.store)?;
            l2_normalize_cells(&mut p.coarse);
            l2_normalize_cells(&mut p.global);
            l2_normalize_cells(&mut p.fine);
            Ok(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemOutput {
    pub matches: MatchSet,
    pub matrix: MatchMatrix,
    pub trace: IterationTrace,
}

/// Full forward pass: features, iterative coarse matching, mutual nearest
/// neighbours and per-match refinement.
pub fn sem_forward(
    view_ref: ViewInput<'_>,
    view_src: ViewInput<'_>,
    cams: (&CameraModel, &CameraModel),
    cfg: &PipelineConfig,
    model: &Model,
) -> Result<SemOutput> {
    cfg.validate()?;
    let ref_pyr = prepare_view(view_ref, model)?;
    let src_pyr = prepare_view(view_src, model)?;
    for (cam, pyr, side) in [(cams.0, &ref_pyr, "reference"), (cams.1, &src_pyr, "source")] {
        cam.validate()?;
        if cam.width != pyr.coarse.width * 8 || cam.height != pyr.coarse.height * 8 {
            return Err(SemError::BadDimensions(format!(
                "{side} camera is {}x{} but its 1/8 map is {}x{}",
                cam.width, cam.height, pyr.coarse.width, pyr.coarse.height
            )));
        }
    }
    let state = initialize(&ref_pyr, &src_pyr, model)?;
    let (matrix, trace) = coarse_match(&state, cams, cfg, model)?;
    let mut matches = extract_matches(&matrix, cfg.theta);
    let refine = RefineConfig {
        window: cfg.window,
        temperature: cfg.fine_tau,
    };
    for m in &mut matches.matches {
        let r = refine_match(&m.ref_pt, &m.src_pt, &ref_pyr.fine, &src_pyr.fine, &refine)?;
        m.src_pt = r.src_pt;
        m.sigma2 = r.sigma2;
    }
    Ok(SemOutput { matches, matrix, trace })
}
