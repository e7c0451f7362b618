//! Loading helpers shared by the subcommands.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sem_core::features::{FeaturePyramid, GrayImage};
use sem_core::geometry::{pixel_to_cell, CameraModel, RelativePose};
use sem_core::io::{load_camera, load_matches, load_pose, load_pyramid, MatchRow};
use sem_core::params::{ModelSpec, ParamStore};

use crate::error::{CliError, CliResult};

/// Seed and gain of the built-in weights used when no parameter file is given.
pub const BUILTIN_PARAM_SEED: u64 = 1;
pub const BUILTIN_PARAM_GAIN: f64 = 0.2;

pub enum View {
    Image(GrayImage),
    Features(FeaturePyramid),
}

pub fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} `{}` does not exist", path.display())))
    }
}

/// A directory is read as a SEMF pyramid, anything else as an image.
pub fn load_view(path: &Path) -> CliResult<View> {
    require_exists(path, "input")?;
    if path.is_dir() {
        return load_pyramid(path)
            .map(View::Features)
            .map_err(|e| CliError::input(path.display(), e));
    }
    let img = image::open(path)
        .map_err(|e| CliError::input(path.display(), e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    let img = GrayImage::new(w, h, data).map_err(|e| CliError::input(path.display(), e))?;
    if w % 32 != 0 || h % 32 != 0 {
        return Err(CliError::Input(format!(
            "{}: image is {w}x{h}, sides must be multiples of 32",
            path.display()
        )));
    }
    Ok(View::Image(img))
}

pub fn camera(path: &Path) -> CliResult<CameraModel> {
    require_exists(path, "camera file")?;
    load_camera(path).map_err(|e| CliError::input(path.display(), e))
}

pub fn pose(path: &Path) -> CliResult<RelativePose> {
    require_exists(path, "pose file")?;
    load_pose(path).map_err(|e| CliError::input(path.display(), e))
}

pub fn matches(path: &Path) -> CliResult<Vec<MatchRow>> {
    require_exists(path, "match file")?;
    load_matches(path).map_err(|e| CliError::input(path.display(), e))
}

pub fn params(path: Option<&Path>) -> CliResult<ParamStore> {
    match path {
        None => Ok(ParamStore::seeded(
            &ModelSpec::default(),
            BUILTIN_PARAM_SEED,
            BUILTIN_PARAM_GAIN,
        )),
        Some(p) => {
            require_exists(p, "parameter file")?;
            let bytes = fs::read(p).map_err(|e| CliError::input(p.display(), e))?;
            ParamStore::read_from(bytes.as_slice()).map_err(|e| CliError::input(p.display(), e))
        }
    }
}

/// Coarse cell pair `(ref_index, src_index)` of each row.
pub fn cell_pairs(
    rows: &[MatchRow],
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    scale: usize,
) -> Vec<(usize, usize)> {
    let (rw, rh) = (cam_ref.width / scale, cam_ref.height / scale);
    let (sw, sh) = (cam_src.width / scale, cam_src.height / scale);
    rows.iter()
        .map(|r| {
            let (ax, ay) = pixel_to_cell(&r.ref_pt, scale, rw, rh);
            let (bx, by) = pixel_to_cell(&r.src_pt, scale, sw, sh);
            (ay * rw + ax, by * sw + bx)
        })
        .collect()
}

pub fn cell_set(
    rows: &[MatchRow],
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    scale: usize,
) -> HashSet<(usize, usize)> {
    cell_pairs(rows, cam_ref, cam_src, scale).into_iter().collect()
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(dir.display(), e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::input(path.display(), e))
}
