use std::path::PathBuf;

use clap::Args;
use nalgebra::Point2;

use sem_core::viz::{band_cells, render_svg};

use crate::error::{CliError, CliResult};
use crate::inputs;

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    cam_ref: PathBuf,
    #[arg(long)]
    cam_src: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    /// Pose used for band overlays.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Reference pixel `x,y` whose band is drawn in the source panel; repeatable.
    #[arg(long, value_parser = parse_point)]
    query: Vec<(f64, f64)>,
    /// Band half-width in coarse cells.
    #[arg(long, default_value_t = 10.0)]
    s0: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_point(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(x)?, p(y)?))
}

pub fn run(args: &VizArgs) -> CliResult<()> {
    let cam_ref = inputs::camera(&args.cam_ref)?;
    let cam_src = inputs::camera(&args.cam_src)?;
    let rows = inputs::matches(&args.matches)?;
    let pose = args.pose.as_deref().map(inputs::pose).transpose()?;
    if !args.query.is_empty() && pose.is_none() {
        return Err(CliError::Input("--query needs --pose".into()));
    }
    if !(args.s0 > 0.0) {
        return Err(CliError::Input(format!("--s0 must be positive, got {}", args.s0)));
    }
    let bands: Vec<_> = match &pose {
        Some(pose) => args
            .query
            .iter()
            .map(|&(x, y)| ((x, y), band_cells(&cam_ref, &cam_src, pose, Point2::new(x, y), args.s0)))
            .collect(),
        None => Vec::new(),
    };
    inputs::write(&args.out, render_svg(&cam_ref, &cam_src, &rows, &bands))
}
