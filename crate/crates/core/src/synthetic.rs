//! Calibrated two-view scenes with exact geometry, used as the ground-truth
//! oracle for geometry, matching and the end-to-end pipeline.
//!
//! Every scene point is placed on a reference cell center (one point per
//! cell) at a random depth, so reference coordinates are exact and the source
//! projection carries all of the subpixel information.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{Point2, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SemError};
use crate::features::{FeatureMap, FeaturePyramid, GrayImage};
use crate::geometry::{cell_center, pixel_to_cell, CameraModel, RelativePose};

/// Coarse grid factor used for scene construction and ground truth.
pub const COARSE_SCALE: usize = 8;
const FINE_SCALE: usize = 2;
const MAX_ATTEMPTS_PER_POINT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub points: usize,
    /// Metric distance between the camera centers.
    pub baseline: f64,
    /// Rotation magnitude in degrees, about an axis perpendicular to the optical axis.
    pub rotation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub descriptor_dim: usize,
    /// Number of point pairs that share one descriptor (repetitive texture).
    pub duplicate_pairs: usize,
    /// Number of points sharing a single low-contrast descriptor.
    pub textureless: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            points: 150,
            baseline: 0.4,
            rotation_deg: 8.0,
            width: 256,
            height: 256,
            focal: 230.0,
            depth_min: 4.0,
            depth_max: 8.0,
            descriptor_dim: 32,
            duplicate_pairs: 0,
            textureless: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Points in the reference camera frame.
    pub points: Vec<Vector3<f64>>,
    pub cam_ref: CameraModel,
    pub cam_src: CameraModel,
    /// Unit-translation pose; the translation is zero for a zero baseline.
    pub pose: RelativePose,
    /// Metric translation, `X_src = R X_ref + t`.
    pub translation: Vector3<f64>,
    /// Unit-norm (or deliberately weak, for textureless points) descriptors.
    pub descriptors: Vec<Vec<f64>>,
    pub image_ref: GrayImage,
    pub image_src: GrayImage,
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Builds a scene; deterministic per `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.points < 8 {
        return Err(SemError::InvalidConfig(format!(
            "scene needs at least 8 points, got {}",
            spec.points
        )));
    }
    if !spec.width.is_multiple_of(32) || !spec.height.is_multiple_of(32) || spec.width == 0 || spec.height == 0 {
        return Err(SemError::BadDimensions(format!(
            "scene images must be multiples of 32, got {}x{}",
            spec.width, spec.height
        )));
    }
    if 2 * spec.duplicate_pairs + spec.textureless > spec.points {
        return Err(SemError::InvalidConfig(
            "duplicate and textureless points exceed the point count".into(),
        ));
    }
    if !(spec.depth_min > 0.0 && spec.depth_max >= spec.depth_min) || spec.descriptor_dim == 0 {
        return Err(SemError::InvalidConfig("invalid depth range or descriptor size".into()));
    }
    let cam = CameraModel::new(
        spec.focal,
        spec.focal,
        spec.width as f64 / 2.0,
        spec.height as f64 / 2.0,
        spec.width,
        spec.height,
    )?;
    let (gw, gh) = (spec.width / COARSE_SCALE, spec.height / COARSE_SCALE);
    if spec.points > gw * gh {
        return Err(SemError::InfeasibleSpec(format!(
            "{} points do not fit in a {gw}x{gh} grid",
            spec.points
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Unit::new_normalize(Vector3::new(phi.cos(), phi.sin(), 0.0));
    let rotation = *Rotation3::from_axis_angle(&axis, spec.rotation_deg.to_radians()).matrix();
    let psi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let direction = Vector3::new(psi.cos(), psi.sin(), rng.random_range(-0.3..0.3)).normalize();
    let translation = direction * spec.baseline;
    let pose = if spec.baseline > 0.0 {
        RelativePose::new(rotation, translation)?
    } else {
        RelativePose {
            rotation,
            translation: Vector3::zeros(),
        }
    };

    let mut free: Vec<usize> = (0..gw * gh).collect();
    let mut points = Vec::with_capacity(spec.points);
    let mut attempts = 0;
    while points.len() < spec.points {
        if attempts >= MAX_ATTEMPTS_PER_POINT * spec.points || free.is_empty() {
            return Err(SemError::InfeasibleSpec(format!(
                "only {} of {} points are visible in both views",
                points.len(),
                spec.points
            )));
        }
        attempts += 1;
        let slot = rng.random_range(0..free.len());
        let cell = free[slot];
        let pixel = cell_center(cell % gw, cell / gw, COARSE_SCALE);
        let depth = rng.random_range(spec.depth_min..=spec.depth_max);
        let p = cam.unproject(&pixel) * depth;
        let q = rotation * p + translation;
        if cam.project(&q).is_some_and(|s| cam.contains(&s)) {
            points.push(p);
            free.swap_remove(slot);
        }
    }

    let mut descriptors: Vec<Vec<f64>> = (0..spec.points)
        .map(|_| unit_gaussian(spec.descriptor_dim, &mut rng))
        .collect();
    for k in 0..spec.duplicate_pairs {
        descriptors[2 * k + 1] = descriptors[2 * k].clone();
    }
    if spec.textureless > 0 {
        let weak: Vec<f64> = unit_gaussian(spec.descriptor_dim, &mut rng)
            .into_iter()
            .map(|v| 0.1 * v)
            .collect();
        let start = 2 * spec.duplicate_pairs;
        for d in descriptors.iter_mut().skip(start).take(spec.textureless) {
            *d = weak.clone();
        }
    }

    let mut scene = Scene {
        points,
        cam_ref: cam,
        cam_src: cam,
        pose,
        translation,
        descriptors,
        image_ref: GrayImage::zeros(spec.width, spec.height),
        image_src: GrayImage::zeros(spec.width, spec.height),
    };
    scene.image_ref = render_image(&scene, false);
    scene.image_src = render_image(&scene, true);
    Ok(scene)
}

impl Scene {
    pub fn project_ref(&self, k: usize) -> Point2<f64> {
        self.cam_ref
            .project(&self.points[k])
            .expect("scene points lie in front of the reference camera")
    }

    pub fn project_src(&self, k: usize) -> Point2<f64> {
        let q = self.pose.rotation * self.points[k] + self.translation;
        self.cam_src
            .project(&q)
            .expect("scene points lie in front of the source camera")
    }
}

/// Gaussian blobs whose brightness follows the point's descriptor.
fn render_image(scene: &Scene, source: bool) -> GrayImage {
    let (w, h) = (scene.cam_ref.width, scene.cam_ref.height);
    let mut img = GrayImage::new(w, h, vec![0.2; w * h]).expect("sized buffer");
    let sigma: f64 = 1.5;
    let radius = (3.0 * sigma).ceil() as isize;
    for k in 0..scene.points.len() {
        let p = if source {
            scene.project_src(k)
        } else {
            scene.project_ref(k)
        };
        let d = &scene.descriptors[k];
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let amplitude = norm * (0.3 + 0.25 * (1.0 + (4.0 * d[0] / norm.max(1e-12)).tanh()));
        let (px, py) = (p.x.floor() as isize, p.y.floor() as isize);
        for y in (py - radius).max(0)..=(py + radius).min(h as isize - 1) {
            for x in (px - radius).max(0)..=(px + radius).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - p.x;
                let dy = y as f64 + 0.5 - p.y;
                let v = &mut img.data[y as usize * w + x as usize];
                *v = (*v + amplitude * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()).min(1.0);
            }
        }
    }
    img
}

/// One ground-truth correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMatch {
    pub point: usize,
    pub ref_index: usize,
    pub src_index: usize,
    /// Reference cell center (the exact projection of the point).
    pub ref_pt: Point2<f64>,
    /// Exact subpixel source projection.
    pub src_pt: Point2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub matches: Vec<GtMatch>,
    pub ref_dims: (usize, usize),
    pub src_dims: (usize, usize),
}

impl GroundTruth {
    pub fn coarse_pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.ref_index, m.src_index)).collect()
    }

    pub fn coarse_set(&self) -> HashSet<(usize, usize)> {
        self.coarse_pairs().into_iter().collect()
    }

    /// Reference cell index to exact source location.
    pub fn fine_map(&self) -> HashMap<usize, Point2<f64>> {
        self.matches.iter().map(|m| (m.ref_index, m.src_pt)).collect()
    }
}

/// Winner per cell: the point whose projection is nearest the cell center.
fn cell_winners(pts: &[Point2<f64>], scale: usize, gw: usize, gh: usize) -> BTreeMap<usize, usize> {
    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (k, p) in pts.iter().enumerate() {
        let (cx, cy) = pixel_to_cell(p, scale, gw, gh);
        let c = cell_center(cx, cy, scale);
        let d = (p - c).norm_squared();
        let idx = cy * gw + cx;
        match best.get(&idx) {
            Some(&(_, bd)) if bd <= d => {}
            _ => {
                best.insert(idx, (k, d));
            }
        }
    }
    best.into_iter().map(|(cell, (k, _))| (cell, k)).collect()
}

/// Coarse ground-truth pairs at `scale`, with collisions resolved on both
/// sides by keeping the point nearest to the cell center.
pub fn ground_truth_matches(scene: &Scene, scale: usize) -> GroundTruth {
    let (rw, rh) = (scene.cam_ref.width / scale, scene.cam_ref.height / scale);
    let (sw, sh) = (scene.cam_src.width / scale, scene.cam_src.height / scale);
    let n = scene.points.len();
    let ref_pts: Vec<_> = (0..n).map(|k| scene.project_ref(k)).collect();
    let src_pts: Vec<_> = (0..n).map(|k| scene.project_src(k)).collect();
    let ref_win: HashMap<usize, usize> = cell_winners(&ref_pts, scale, rw, rh)
        .into_iter()
        .map(|(c, k)| (k, c))
        .collect();
    let src_win: HashMap<usize, usize> = cell_winners(&src_pts, scale, sw, sh)
        .into_iter()
        .map(|(c, k)| (k, c))
        .collect();
    let mut matches: Vec<GtMatch> = (0..n)
        .filter_map(|k| {
            let (&ri, &si) = (ref_win.get(&k)?, src_win.get(&k)?);
            Some(GtMatch {
                point: k,
                ref_index: ri,
                src_index: si,
                ref_pt: ref_pts[k],
                src_pt: src_pts[k],
            })
        })
        .collect();
    matches.sort_by_key(|m| m.ref_index);
    GroundTruth {
        matches,
        ref_dims: (rw, rh),
        src_dims: (sw, sh),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Per-channel uniform noise amplitude added to occupied cells.
    pub noise: f64,
    /// Per-channel uniform noise amplitude of empty cells.
    pub empty_noise: f64,
    /// Spread of the fine-map splat, in fine cells.
    pub fine_sigma: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise: 0.01,
            empty_noise: 0.01,
            fine_sigma: 1.0,
            seed: 0,
        }
    }
}

fn render_map(
    pts: &[Point2<f64>],
    scene: &Scene,
    cam: &CameraModel,
    scale: usize,
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let (gw, gh) = (cam.width / scale, cam.height / scale);
    let c = scene.descriptors.first().map_or(1, Vec::len);
    let mut map = FeatureMap::zeros(gh, gw, c, scale);
    let winners: HashMap<usize, usize> = cell_winners(pts, scale, gw, gh).into_iter().collect();
    for cell in 0..gw * gh {
        let (y, x) = (cell / gw, cell % gw);
        let out = map.pixel_mut(y, x);
        match winners.get(&cell) {
            Some(&k) => {
                for (o, d) in out.iter_mut().zip(&scene.descriptors[k]) {
                    *o = d + opts.noise * rng.random_range(-1.0..=1.0);
                }
            }
            None => {
                for o in out.iter_mut() {
                    *o = opts.empty_noise * rng.random_range(-1.0..=1.0);
                }
            }
        }
    }
    map
}

/// Fine map where each point adds its descriptor to nearby cells with a
/// Gaussian weight on the distance between the cell center and the point.
fn render_fine(
    pts: &[Point2<f64>],
    scene: &Scene,
    cam: &CameraModel,
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let (gw, gh) = (cam.width / FINE_SCALE, cam.height / FINE_SCALE);
    let c = scene.descriptors.first().map_or(1, Vec::len);
    let mut map = FeatureMap::zeros(gh, gw, c, FINE_SCALE);
    for v in map.data.iter_mut() {
        *v = opts.empty_noise * rng.random_range(-1.0..=1.0);
    }
    let s = FINE_SCALE as f64;
    let sigma = opts.fine_sigma.max(1e-3);
    let radius = (3.0 * sigma).ceil() as isize;
    for (k, p) in pts.iter().enumerate() {
        let (fx, fy) = ((p.x / s).floor() as isize, (p.y / s).floor() as isize);
        for y in (fy - radius).max(0)..=(fy + radius).min(gh as isize - 1) {
            for x in (fx - radius).max(0)..=(fx + radius).min(gw as isize - 1) {
                let dx = (x as f64 + 0.5) - p.x / s;
                let dy = (y as f64 + 0.5) - p.y / s;
                let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                for (o, d) in map
                    .pixel_mut(y as usize, x as usize)
                    .iter_mut()
                    .zip(&scene.descriptors[k])
                {
                    *o += w * d;
                }
            }
        }
    }
    map
}

fn pool4(f8: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (f8.height / 4, f8.width / 4, f8.channels);
    let mut out = FeatureMap::zeros(h, w, c, 32);
    for y in 0..h {
        for x in 0..w {
            for dy in 0..4 {
                for dx in 0..4 {
                    let src = f8.pixel(4 * y + dy, 4 * x + dx).to_vec();
                    for (o, v) in out.pixel_mut(y, x).iter_mut().zip(src) {
                        *o += v / 16.0;
                    }
                }
            }
        }
    }
    out
}

/// Descriptor maps that stand in for a trained backbone.
///
/// Cells holding a projected point carry its descriptor plus seeded noise;
/// empty cells get low-amplitude noise. The 1/32 map is the 4x4 average of
/// the 1/8 map; the 1/2 map splats each descriptor around its projection.
pub fn render_feature_maps(scene: &Scene, opts: &RenderOptions) -> (FeaturePyramid, FeaturePyramid) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = scene.points.len();
    let ref_pts: Vec<_> = (0..n).map(|k| scene.project_ref(k)).collect();
    let src_pts: Vec<_> = (0..n).map(|k| scene.project_src(k)).collect();
    let mut side = |pts: &[Point2<f64>], cam: &CameraModel| {
        let coarse = render_map(pts, scene, cam, COARSE_SCALE, opts, &mut rng);
        let fine = render_fine(pts, scene, cam, opts, &mut rng);
        FeaturePyramid {
            global: pool4(&coarse),
            coarse,
            fine,
        }
    };
    let r = side(&ref_pts, &scene.cam_ref);
    let s = side(&src_pts, &scene.cam_src);
    (r, s)
}
