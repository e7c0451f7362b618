use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use sem_core::geometry::pose_error;
use sem_core::io::{format_matches, match_rows, PoseFile};
use sem_core::matching::extract_matches;
use sem_core::metrics::cell_precision;
use sem_core::pipeline::{sem_forward, Model, ViewInput};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::inputs::{self, View};

#[derive(Args, Debug)]
pub struct MatchArgs {
    /// Directory written by `sem synth`; fills in inputs, cameras and ground truth.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Reference image, or directory of SEMF maps.
    #[arg(long = "ref")]
    ref_input: Option<PathBuf>,
    /// Source image, or directory of SEMF maps.
    #[arg(long = "src")]
    src_input: Option<PathBuf>,
    #[arg(long)]
    cam_ref: Option<PathBuf>,
    #[arg(long)]
    cam_src: Option<PathBuf>,
    /// SEMP parameter file; built-in seeded weights otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Ground-truth match file for per-iteration precision.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Ground-truth pose for per-iteration pose errors.
    #[arg(long)]
    pose_gt: Option<PathBuf>,
    /// key=value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    s0: Option<f64>,
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long)]
    sigma_h: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    fine_tau: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, env = "SEM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    no_anchors: bool,
    #[arg(long)]
    no_bands: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl MatchArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            inputs::require_exists(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| CliError::input(path.display(), e))?;
            cfg.apply_text(&text).map_err(|e| CliError::input(path.display(), e))?;
        }
        if let Some(dir) = &self.scene {
            inputs::require_exists(dir, "scene directory")?;
            cfg.ref_input = Some(dir.join("ref"));
            cfg.src_input = Some(dir.join("src"));
            cfg.cam_ref = Some(dir.join("cam_ref.json"));
            cfg.cam_src = Some(dir.join("cam_src.json"));
            cfg.gt = Some(dir.join("gt.tsv"));
            let pose = dir.join("pose.json");
            // Zero-baseline scenes have no pose file.
            cfg.pose_gt = pose.exists().then_some(pose);
        }
        let p = &mut cfg.pipeline;
        macro_rules! over {
            ($field:ident, $target:expr) => {
                if let Some(v) = self.$field {
                    $target = v;
                }
            };
        }
        over!(s0, p.s0);
        over!(anchors, p.anchors);
        over!(sigma_h, p.sigma_h);
        over!(theta, p.theta);
        over!(iters, p.iterations);
        over!(tau, p.tau);
        over!(fine_tau, p.fine_tau);
        over!(window, p.window);
        over!(seed, p.seed);
        if self.no_anchors {
            p.use_anchors = false;
        }
        if self.no_bands {
            p.use_bands = false;
        }
        let paths = [
            (&self.ref_input, &mut cfg.ref_input),
            (&self.src_input, &mut cfg.src_input),
            (&self.cam_ref, &mut cfg.cam_ref),
            (&self.cam_src, &mut cfg.cam_src),
            (&self.params, &mut cfg.params),
            (&self.gt, &mut cfg.gt),
            (&self.pose_gt, &mut cfg.pose_gt),
            (&self.out, &mut cfg.out),
        ];
        for (flag, slot) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        cfg.pipeline.validate().map_err(CliError::from_run)?;
        Ok(cfg)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Input(format!("missing {what}")))
}

#[derive(Serialize)]
struct IterationReport {
    iteration: usize,
    pose: Option<PoseFile>,
    rotation_error_deg: Option<f64>,
    translation_error_deg: Option<f64>,
    anchors: usize,
    band_validity_pct: f64,
    gt_cell_precision: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    config: String,
    matches: usize,
    matches_path: String,
    iterations: Vec<IterationReport>,
}

pub fn run(args: &MatchArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let out = required(&cfg.out, "--out")?;
    let ref_view = inputs::load_view(required(&cfg.ref_input, "--ref input")?)?;
    let src_view = inputs::load_view(required(&cfg.src_input, "--src input")?)?;
    let cam_ref = inputs::camera(required(&cfg.cam_ref, "--cam-ref")?)?;
    let cam_src = inputs::camera(required(&cfg.cam_src, "--cam-src")?)?;
    let gt = cfg.gt.as_deref().map(inputs::matches).transpose()?;
    let pose_gt = cfg.pose_gt.as_deref().map(inputs::pose).transpose()?;
    let model =
        Model::new(inputs::params(cfg.params.as_deref())?).map_err(|e| CliError::Input(format!("parameters: {e}")))?;

    let output = sem_forward(
        as_input(&ref_view),
        as_input(&src_view),
        (&cam_ref, &cam_src),
        &cfg.pipeline,
        &model,
    )
    .map_err(CliError::from_run)?;

    let gt_cells = gt.as_ref().map(|rows| inputs::cell_set(rows, &cam_ref, &cam_src, 8));
    let iterations = output
        .trace
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let errs = r.pose.as_ref().zip(pose_gt.as_ref()).map(|(e, t)| pose_error(e, t));
            IterationReport {
                iteration: k + 1,
                pose: r.pose.as_ref().map(PoseFile::from),
                rotation_error_deg: errs.map(|e| e.0),
                translation_error_deg: errs.map(|e| e.1),
                anchors: r.anchors,
                band_validity_pct: 100.0 * r.band_validity,
                gt_cell_precision: gt_cells
                    .as_ref()
                    .and_then(|set| cell_precision(&extract_matches(&r.matrix, cfg.pipeline.theta).pairs(), set)),
            }
        })
        .collect();

    let tsv = out.join("matches.tsv");
    inputs::write(&tsv, format_matches(&match_rows(&output.matches)))?;
    let report = Report {
        config: cfg.to_text(),
        matches: output.matches.len(),
        matches_path: tsv.display().to_string(),
        iterations,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Pipeline(e.to_string()))?;
    inputs::write(&out.join("report.json"), json + "\n")?;
    println!("{} matches written to {}", output.matches.len(), tsv.display());
    Ok(())
}

fn as_input(v: &View) -> ViewInput<'_> {
    match v {
        View::Image(i) => ViewInput::Image(i),
        View::Features(f) => ViewInput::Features(f),
    }
}
