use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use sem_core::geometry::{pose_error, Correspondence};
use sem_core::metrics::{cell_metrics, pose_auc, CellMetrics};
use sem_core::pose::{estimate_pose, PoseConfig};

use crate::error::{CliError, CliResult};
use crate::inputs;

pub const AUC_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted match file; repeat together with --scene, paired in order.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Scene directory from `sem synth` holding gt.tsv, cameras and pose.json.
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    #[arg(long, env = "SEM_SEED", default_value_t = 0)]
    seed: u64,
    /// Metrics JSON path; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SceneMetrics {
    scene: String,
    #[serde(flatten)]
    cells: CellMetrics,
    rotation_error_deg: Option<f64>,
    translation_error_deg: Option<f64>,
}

#[derive(Serialize)]
struct Auc {
    #[serde(rename = "5")]
    at5: f64,
    #[serde(rename = "10")]
    at10: f64,
    #[serde(rename = "20")]
    at20: f64,
}

#[derive(Serialize)]
struct EvalReport {
    scenes: Vec<SceneMetrics>,
    mean_precision: f64,
    mean_recall: f64,
    pose_auc: Auc,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    if args.pred.len() != args.scene.len() {
        return Err(CliError::Input(format!(
            "{} prediction files for {} scenes",
            args.pred.len(),
            args.scene.len()
        )));
    }
    let mut scenes = Vec::new();
    let mut errors = Vec::new();
    for (pred_path, dir) in args.pred.iter().zip(&args.scene) {
        inputs::require_exists(dir, "scene directory")?;
        let pred = inputs::matches(pred_path)?;
        let gt = inputs::matches(&dir.join("gt.tsv"))?;
        let cam_ref = inputs::camera(&dir.join("cam_ref.json"))?;
        let cam_src = inputs::camera(&dir.join("cam_src.json"))?;
        let pose_path = dir.join("pose.json");
        let truth = pose_path.exists().then(|| inputs::pose(&pose_path)).transpose()?;

        let cells = cell_metrics(
            &inputs::cell_pairs(&pred, &cam_ref, &cam_src, 8),
            &inputs::cell_pairs(&gt, &cam_ref, &cam_src, 8),
        )
        .map_err(|e| CliError::input(dir.join("gt.tsv").display(), e))?;

        let mut err = None;
        if let Some(truth) = truth {
            let corr: Vec<Correspondence> = pred
                .iter()
                .map(|r| Correspondence::new(r.ref_pt, r.src_pt, r.confidence))
                .collect();
            let cfg = PoseConfig {
                inlier_threshold: 1.0 / cam_ref.fx,
                ..PoseConfig::default()
            };
            err = estimate_pose(&corr, &cam_ref, &cam_src, &cfg, args.seed)
                .ok()
                .map(|p| pose_error(&p, &truth));
            errors.push(err.map_or(f64::INFINITY, |(r, t)| r.max(t)));
        }
        scenes.push(SceneMetrics {
            scene: dir.display().to_string(),
            cells,
            rotation_error_deg: err.map(|e| e.0),
            translation_error_deg: err.map(|e| e.1),
        });
    }
    let n = scenes.len() as f64;
    let auc = pose_auc(&errors, &AUC_THRESHOLDS);
    let report = EvalReport {
        mean_precision: scenes.iter().map(|s| s.cells.precision).sum::<f64>() / n,
        mean_recall: scenes.iter().map(|s| s.cells.recall).sum::<f64>() / n,
        scenes,
        pose_auc: Auc {
            at5: auc[0],
            at10: auc[1],
            at20: auc[2],
        },
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Pipeline(e.to_string()))? + "\n";
    match &args.out {
        Some(p) => inputs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}
