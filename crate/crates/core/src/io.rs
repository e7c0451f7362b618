//! File formats: SEMF feature maps, camera and pose JSON, match TSV and
//! scene JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::features::{FeatureMap, FeaturePyramid};
use crate::geometry::{CameraModel, RelativePose};
use crate::matching::{Match, MatchSet};
use crate::params::read_u32;
use crate::synthetic::Scene;

pub const FEATURE_MAGIC: &[u8; 4] = b"SEMF";
pub const MATCH_HEADER: &str = "ref_x\tref_y\tsrc_x\tsrc_y\tconfidence\tsigma2";

/// Little-endian: magic, `u32` height, width, channels, scale, then `f32`
/// values in `(y, x, c)` order.
pub fn write_features<W: Write>(map: &FeatureMap, mut w: W) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for v in [map.height, map.width, map.channels, map.scale] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(map.data.len() * 4);
    for v in &map.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| SemError::Format("truncated header: missing SEMF magic".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(SemError::Format(format!("bad SEMF magic: found {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(&mut r).map_err(|_| SemError::Format("truncated SEMF header".into()))? as usize;
    }
    let [h, w, c, scale] = dims;
    let len = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .filter(|&v| v <= 1 << 28)
        .ok_or_else(|| SemError::Format(format!("implausible SEMF shape {h}x{w}x{c}")))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| SemError::Format(format!("SEMF payload shorter than {h}x{w}x{c}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    FeatureMap::new(h, w, c, scale, data)
}

pub fn save_features(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_features(map, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    read_features(fs::File::open(path)?)
}

/// File names of a pyramid inside a directory.
pub const PYRAMID_FILES: [&str; 3] = ["scale8.semf", "scale32.semf", "scale2.semf"];

pub fn save_pyramid(p: &FeaturePyramid, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_features(&p.coarse, &dir.join(PYRAMID_FILES[0]))?;
    save_features(&p.global, &dir.join(PYRAMID_FILES[1]))?;
    save_features(&p.fine, &dir.join(PYRAMID_FILES[2]))?;
    Ok(())
}

pub fn load_pyramid(dir: &Path) -> Result<FeaturePyramid> {
    let p = FeaturePyramid {
        coarse: load_features(&dir.join(PYRAMID_FILES[0]))?,
        global: load_features(&dir.join(PYRAMID_FILES[1]))?,
        fine: load_features(&dir.join(PYRAMID_FILES[2]))?,
    };
    p.validate()?;
    Ok(p)
}

pub fn load_camera(path: &Path) -> Result<CameraModel> {
    let cam: CameraModel = serde_json::from_str(&fs::read_to_string(path)?)?;
    cam.validate()?;
    Ok(cam)
}

pub fn save_camera(cam: &CameraModel, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cam)? + "\n")?;
    Ok(())
}

/// JSON form of a pose: row-major rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "T")]
    pub translation: [f64; 3],
}

impl From<&RelativePose> for PoseFile {
    fn from(p: &RelativePose) -> Self {
        let r = p.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseFile {
    /// Validated pose; the translation is renormalized.
    pub fn to_pose(&self) -> Result<RelativePose> {
        let pose = RelativePose::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_column_slice(&self.translation),
        )?;
        pose.validate()?;
        Ok(pose)
    }
}

pub fn load_pose(path: &Path) -> Result<RelativePose> {
    let f: PoseFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    f.to_pose()
}

pub fn save_pose(pose: &RelativePose, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&PoseFile::from(pose))? + "\n")?;
    Ok(())
}

/// Shortest-form rendering with six significant digits, like C's `%g`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { format!("{v}") };
    }
    // The exponent comes from the rounded scientific form so carries into
    // the next decade are handled.
    let sci = format!("{v:.5e}");
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    if (-5..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{e}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// One row of a match file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRow {
    pub ref_pt: Point2<f64>,
    pub src_pt: Point2<f64>,
    pub confidence: f64,
    pub sigma2: f64,
}

impl From<&Match> for MatchRow {
    fn from(m: &Match) -> Self {
        Self {
            ref_pt: m.ref_pt,
            src_pt: m.src_pt,
            confidence: m.confidence,
            sigma2: m.sigma2,
        }
    }
}

pub fn format_matches(rows: &[MatchRow]) -> String {
    let mut out = String::from(MATCH_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [r.ref_pt.x, r.ref_pt.y, r.src_pt.x, r.src_pt.y, r.confidence, r.sigma2].map(format_sig6);
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn match_rows(set: &MatchSet) -> Vec<MatchRow> {
    set.matches.iter().map(MatchRow::from).collect()
}

pub fn parse_matches(text: &str) -> Result<Vec<MatchRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MATCH_HEADER => {}
        Some(h) => return Err(SemError::Format(format!("unexpected match header `{h}`"))),
        None => return Err(SemError::Format("empty match file".into())),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split('\t')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SemError::Format(format!("match line {}: {e}", n + 2)))?;
        if vals.len() != 6 {
            return Err(SemError::Format(format!(
                "match line {}: expected 6 fields, found {}",
                n + 2,
                vals.len()
            )));
        }
        rows.push(MatchRow {
            ref_pt: Point2::new(vals[0], vals[1]),
            src_pt: Point2::new(vals[2], vals[3]),
            confidence: vals[4],
            sigma2: vals[5],
        });
    }
    Ok(rows)
}

pub fn load_matches(path: &Path) -> Result<Vec<MatchRow>> {
    parse_matches(&fs::read_to_string(path)?)
}

/// JSON form of a scene; descriptors and images travel separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub cam_ref: CameraModel,
    pub cam_src: CameraModel,
    pub pose: PoseFile,
    pub translation: [f64; 3],
    pub points: Vec<[f64; 3]>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        Self {
            cam_ref: s.cam_ref,
            cam_src: s.cam_src,
            pose: PoseFile::from(&s.pose),
            translation: [s.translation.x, s.translation.y, s.translation.z],
            points: s.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn features_round_trip_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..4 * 6 * 3)
            .map(|_| f64::from(rng.random_range(-1.0f32..1.0)))
            .collect();
        let map = FeatureMap::new(4, 6, 3, 8, data).unwrap();
        let mut buf = Vec::new();
        write_features(&map, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SEMF");
        assert_eq!(buf.len(), 4 + 16 + 4 * 72);
        assert_eq!(read_features(buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn corrupt_feature_headers_name_the_magic() {
        let err = read_features(&b"SEMX\0\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("SEMF"));
        let err = read_features(&b"SE"[..]).unwrap_err();
        assert!(err.to_string().contains("SEMF"));
        let mut buf = Vec::new();
        write_features(&FeatureMap::zeros(2, 2, 2, 8), &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_features(buf.as_slice()).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(132.0), "132");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(-2.25), "-2.25");
        assert_eq!(format_sig6(1e-7), "1e-7");
        assert_eq!(format_sig6(999999.7), "1e6");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
    }

    #[test]
    fn match_text_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<MatchRow> = (0..50)
            .map(|_| MatchRow {
                ref_pt: Point2::new(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)),
                src_pt: Point2::new(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)),
                confidence: rng.random_range(0.0..1.0),
                sigma2: rng.random_range(0.0..1e-3),
            })
            .collect();
        let text = format_matches(&rows);
        let parsed = parse_matches(&text).unwrap();
        assert_eq!(format_matches(&parsed), text);
        assert!(parse_matches("a\tb\n").is_err());
        assert!(parse_matches(&format!("{MATCH_HEADER}\n1\t2\t3\n")).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let pose = RelativePose::identity_rotation(Vector3::new(1.0, 2.0, 2.0)).unwrap();
        let json = serde_json::to_string(&PoseFile::from(&pose)).unwrap();
        assert!(json.contains("\"R\"") && json.contains("\"T\""));
        let back: PoseFile = serde_json::from_str(&json).unwrap();
        let p = back.to_pose().unwrap();
        assert!((p.translation - pose.translation).norm() < 1e-15);
    }
}
