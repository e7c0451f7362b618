use std::path::{Path, PathBuf};

use clap::Args;

use sem_core::features::GrayImage;
use sem_core::io::{format_matches, save_camera, save_pose, save_pyramid, MatchRow, SceneFile};
use sem_core::synthetic::{
    generate_scene, ground_truth_matches, render_feature_maps, RenderOptions, SceneSpec, COARSE_SCALE,
};

use crate::error::{CliError, CliResult};
use crate::inputs;

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 150)]
    points: usize,
    #[arg(long, default_value_t = 0.4)]
    baseline: f64,
    /// Rotation magnitude in degrees.
    #[arg(long, default_value_t = 8.0)]
    rotation: f64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 230.0)]
    focal: f64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Point pairs sharing one descriptor.
    #[arg(long, default_value_t = 0)]
    duplicates: usize,
    /// Points sharing a weak common descriptor.
    #[arg(long, default_value_t = 0)]
    textureless: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.01)]
    empty_noise: f64,
    /// Spread of the refinement-map splat, in fine cells.
    #[arg(long, default_value_t = 1.0)]
    fine_sigma: f64,
    #[arg(long, env = "SEM_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn pgm_bytes(img: &GrayImage) -> CliResult<Vec<u8>> {
    let raw: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| CliError::Pipeline("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Pnm)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    Ok(out.into_inner())
}

fn save(path: &Path, r: sem_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::input(path.display(), e))
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let spec = SceneSpec {
        points: args.points,
        baseline: args.baseline,
        rotation_deg: args.rotation,
        width: args.width,
        height: args.height,
        focal: args.focal,
        descriptor_dim: args.dim,
        duplicate_pairs: args.duplicates,
        textureless: args.textureless,
        seed: args.seed,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).map_err(CliError::from_run)?;
    let opts = RenderOptions {
        noise: args.noise,
        empty_noise: args.empty_noise,
        fine_sigma: args.fine_sigma,
        seed: args.seed,
    };
    let (ref_maps, src_maps) = render_feature_maps(&scene, &opts);
    let gt = ground_truth_matches(&scene, COARSE_SCALE);

    let out = &args.out;
    let json = serde_json::to_string_pretty(&SceneFile::from(&scene)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    inputs::write(&out.join("scene.json"), json + "\n")?;
    for (name, cam) in [("cam_ref.json", &scene.cam_ref), ("cam_src.json", &scene.cam_src)] {
        let p = out.join(name);
        save(&p, save_camera(cam, &p))?;
    }
    if scene.translation.norm() > 0.0 {
        let p = out.join("pose.json");
        save(&p, save_pose(&scene.pose, &p))?;
    }
    for (name, maps) in [("ref", &ref_maps), ("src", &src_maps)] {
        let p = out.join(name);
        save(&p, save_pyramid(maps, &p))?;
    }
    let rows: Vec<MatchRow> = gt
        .matches
        .iter()
        .map(|m| MatchRow {
            ref_pt: m.ref_pt,
            src_pt: m.src_pt,
            confidence: 1.0,
            sigma2: 0.0,
        })
        .collect();
    inputs::write(&out.join("gt.tsv"), format_matches(&rows))?;
    inputs::write(&out.join("ref.pgm"), pgm_bytes(&scene.image_ref)?)?;
    inputs::write(&out.join("src.pgm"), pgm_bytes(&scene.image_src)?)?;
    println!(
        "scene with {} points and {} ground-truth matches written to {}",
        scene.points.len(),
        rows.len(),
        out.display()
    );
    Ok(())
}
