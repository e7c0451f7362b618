//! Pinhole cameras, relative poses and epipolar bands.
//!
//! Pixel coordinates are `(x = column, y = row)`. Homogeneous points are
//! dehomogenized as `(p.x / p.z, p.y / p.z)`. The relative pose maps
//! reference-camera coordinates into source-camera coordinates:
//! `X_src = R * X_ref + T`.

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(SemError::InvalidConfig(format!(
                "camera focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SemError::InvalidConfig(format!(
                "camera image must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Identity intrinsics, mostly useful in tests.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width,
            height,
        }
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera whose pixel grid is the coarse feature grid at `scale`.
    ///
    /// Cell `(i, j)` covers pixels `[scale*i, scale*(i+1))`, so its center lands
    /// on the integer grid coordinate `i`.
    pub fn to_grid(&self, scale: usize) -> Self {
        let s = scale as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s - 0.5,
            cy: self.cy / s - 0.5,
            width: self.width / scale,
            height: self.height / scale,
        }
    }

    /// Normalized camera ray for a pixel, `K^-1 (x, y, 1)`.
    pub fn unproject(&self, pixel: &Point2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Pixel of a camera-frame point; `None` behind the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<Point2<f64>> {
        if point.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    pub fn contains(&self, pixel: &Point2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }
}

/// Pixel center of a coarse cell (column `cx`, row `cy`) at the given scale.
pub fn cell_center(cx: usize, cy: usize, scale: usize) -> Point2<f64> {
    let s = scale as f64;
    Point2::new((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s)
}

/// Coarse cell containing a pixel, clamped to the grid.
pub fn pixel_to_cell(pixel: &Point2<f64>, scale: usize, grid_w: usize, grid_h: usize) -> (usize, usize) {
    let s = scale as f64;
    let cx = (pixel.x / s).floor().max(0.0) as usize;
    let cy = (pixel.y / s).floor().max(0.0) as usize;
    (cx.min(grid_w - 1), cy.min(grid_h - 1))
}

/// Rotation plus unit translation direction taking reference-camera
/// coordinates to source-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    /// Builds a pose, normalizing the translation to unit length.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let norm = translation.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(SemError::InvalidConfig(
                "pose translation must be non-zero and finite".into(),
            ));
        }
        let pose = Self {
            rotation,
            translation: translation / norm,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity_rotation(translation: Vector3<f64>) -> Result<Self> {
        Self::new(Matrix3::identity(), translation)
    }

    /// Checks orthonormality, unit determinant and unit translation (1e-9).
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        let tnorm = self.translation.norm();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 || (tnorm - 1.0).abs() > 1e-9 {
            return Err(SemError::InvalidConfig(format!(
                "invalid pose: orthogonality error {ortho:.3e}, det {det}, |T| {tnorm}"
            )));
        }
        Ok(())
    }

    /// The source-to-reference pose.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Essential matrix `[T]x R`.
    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.translation) * self.rotation
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Epipolar line in the source image plus a perpendicular-distance tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarBand {
    /// `(a, b, c)` with `a*x + b*y + c = 0` and `a^2 + b^2 = 1`.
    pub line: Vector3<f64>,
    pub tolerance: f64,
    /// `false` when no line could be built; the band then admits everything.
    pub valid: bool,
}

impl EpipolarBand {
    pub fn invalid(tolerance: f64) -> Self {
        Self {
            line: Vector3::zeros(),
            tolerance,
            valid: false,
        }
    }

    /// Unsigned perpendicular distance from `(x, y)` to the line.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        (self.line.x * x + self.line.y * y + self.line.z).abs()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        !self.valid || self.distance(x, y) <= self.tolerance
    }

    /// Slope and intercept of the line, `None` when it is vertical.
    pub fn slope_intercept(&self) -> Option<(f64, f64)> {
        if !self.valid || self.line.y.abs() < 1e-12 {
            return None;
        }
        Some((-self.line.x / self.line.y, -self.line.z / self.line.y))
    }
}

/// A putative correspondence in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub ref_pt: Point2<f64>,
    pub src_pt: Point2<f64>,
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(ref_pt: Point2<f64>, src_pt: Point2<f64>, confidence: f64) -> Self {
        Self {
            ref_pt,
            src_pt,
            confidence,
        }
    }
}

/// Projects the reference ray through `pixel` at unit depth into the source image:
/// `K_src * (R * K_ref^-1 * (x, y, 1) + T)`, left homogeneous.
pub fn project_point(
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    pose: &RelativePose,
    pixel: &Point2<f64>,
) -> Vector3<f64> {
    cam_src.k() * (pose.rotation * cam_ref.k_inv() * Vector3::new(pixel.x, pixel.y, 1.0) + pose.translation)
}

/// Image of the reference camera center in the source view, `K_src * T`.
pub fn epipole(cam_src: &CameraModel, pose: &RelativePose) -> Vector3<f64> {
    cam_src.k() * pose.translation
}

/// Epipolar line of a reference pixel in the source image, widened to a band.
///
/// The line is the cross product of the epipole and the projected unit-depth
/// point, which stays well defined when the epipole is at infinity.
pub fn epipolar_line(
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    pose: &RelativePose,
    pixel: &Point2<f64>,
    tolerance: f64,
) -> Result<EpipolarBand> {
    let e = epipole(cam_src, pose);
    let p = project_point(cam_ref, cam_src, pose, pixel);
    let line = e.cross(&p);
    let ab = line.x.hypot(line.y);
    let scale = e.norm() * p.norm();
    if !(ab > 1e-12 * scale) || !ab.is_finite() {
        return Err(SemError::DegenerateLine);
    }
    Ok(EpipolarBand {
        line: line / ab,
        tolerance,
        valid: true,
    })
}

/// Same as [`epipolar_line`] but folds a degenerate line into an invalid band.
pub fn epipolar_band(
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    pose: &RelativePose,
    pixel: &Point2<f64>,
    tolerance: f64,
) -> EpipolarBand {
    epipolar_line(cam_ref, cam_src, pose, pixel, tolerance).unwrap_or_else(|_| EpipolarBand::invalid(tolerance))
}

/// Bands for every cell of the reference grid, expressed on the source grid.
///
/// Both cameras are converted to grid units so the tolerance is in cells.
pub fn grid_bands(
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    pose: &RelativePose,
    scale: usize,
    tolerance: f64,
) -> Vec<EpipolarBand> {
    let gref = cam_ref.to_grid(scale);
    let gsrc = cam_src.to_grid(scale);
    let mut bands = Vec::with_capacity(gref.width * gref.height);
    for y in 0..gref.height {
        for x in 0..gref.width {
            let pt = Point2::new(x as f64, y as f64);
            bands.push(epipolar_band(&gref, &gsrc, pose, &pt, tolerance));
        }
    }
    bands
}

/// Rasterizes a band onto a `grid_w x grid_h` grid (row-major).
///
/// A cell is set when its center, at integer grid coordinates, lies within
/// the tolerance of the line. Invalid bands yield an all-true grid.
pub fn band_mask(band: &EpipolarBand, grid_w: usize, grid_h: usize) -> Vec<bool> {
    let mut mask = vec![true; grid_w * grid_h];
    if !band.valid {
        return mask;
    }
    for y in 0..grid_h {
        for x in 0..grid_w {
            mask[y * grid_w + x] = band.distance(x as f64, y as f64) <= band.tolerance;
        }
    }
    mask
}

/// Angle of a rotation matrix in radians, stable near zero.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let sin_vec = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin = 0.5 * sin_vec.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// Rotation and translation-direction error in degrees.
///
/// The translation error folds the sign ambiguity: it is the smaller of the
/// angle and its supplement.
pub fn pose_error(estimated: &RelativePose, truth: &RelativePose) -> (f64, f64) {
    let rot = rotation_angle(&(estimated.rotation * truth.rotation.transpose())).to_degrees();
    let a = estimated.translation;
    let b = truth.translation;
    let angle = a.cross(&b).norm().atan2(a.dot(&b)).to_degrees();
    (rot, angle.min(180.0 - angle))
}
