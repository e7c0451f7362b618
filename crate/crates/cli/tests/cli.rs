use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{Matrix3, Vector3};
use serde_json::Value;
use tempfile::TempDir;

fn sem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sem"))
        .args(args)
        .env_remove("SEM_SEED")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir)];
    args.extend_from_slice(extra);
    let out = sem(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Parses a match file independently of the library.
fn rows(path: &Path) -> Vec<[f64; 6]> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split('\t').map(|f| f.parse().unwrap()).collect();
            [v[0], v[1], v[2], v[3], v[4], v[5]]
        })
        .collect()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("a"), &["--seed", "11"]);
    synth(&tmp.path().join("b"), &["--seed", "11"]);
    let a = read_tree(&tmp.path().join("a"));
    assert!(a.contains_key(Path::new("scene.json")));
    assert!(a.contains_key(Path::new("ref/scale8.semf")));
    assert!(a.contains_key(Path::new("gt.tsv")));
    assert_eq!(a, read_tree(&tmp.path().join("b")));
}

#[test]
fn synth_rejects_bad_specs() {
    let tmp = TempDir::new().unwrap();
    let out = sem(&["synth", "--points", "4", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = sem(&["synth", "--rotation", "180", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_motion_ground_truth_is_identity() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &["--baseline", "0", "--rotation", "0", "--points", "30"]);
    let gt = rows(&tmp.path().join("gt.tsv"));
    assert_eq!(gt.len(), 30);
    assert!(gt.iter().all(|r| r[0] == r[2] && r[1] == r[3]));
}

#[test]
fn match_writes_outputs_deterministically() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    synth(&scene, &["--seed", "5", "--points", "60"]);
    let out_dir = tmp.path().join("run");
    let mut trees = Vec::new();
    for _ in 0..2 {
        let out = sem(&[
            "match",
            "--scene",
            p(&scene),
            "--iters",
            "2",
            "--seed",
            "3",
            "--out",
            p(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        trees.push(read_tree(&out_dir));
        fs::remove_dir_all(&out_dir).unwrap();
    }
    assert!(trees[0].contains_key(Path::new("matches.tsv")));
    assert!(trees[0].contains_key(Path::new("report.json")));
    assert_eq!(trees[0], trees[1]);
    let report: Value = serde_json::from_slice(&trees[0][Path::new("report.json")]).unwrap();
    assert_eq!(report["iterations"].as_array().unwrap().len(), 2);
    assert!(report["matches"].as_u64().unwrap() > 30);
    assert!(report["config"].as_str().unwrap().contains("seed = 3"));
}

#[test]
fn match_on_images() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("scene");
    synth(&s, &["--seed", "2", "--points", "40"]);
    let out = sem(&[
        "match",
        "--ref",
        p(&s.join("ref.pgm")),
        "--src",
        p(&s.join("src.pgm")),
        "--cam-ref",
        p(&s.join("cam_ref.json")),
        "--cam-src",
        p(&s.join("cam_src.json")),
        "--iters",
        "1",
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("run/matches.tsv").exists());
}

#[test]
fn match_input_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("scene");
    synth(&s, &["--points", "20"]);
    let base = |cam_ref: &Path| {
        sem(&[
            "match",
            "--ref",
            p(&s.join("ref")),
            "--src",
            p(&s.join("src")),
            "--cam-ref",
            p(cam_ref),
            "--cam-src",
            p(&s.join("cam_src.json")),
            "--out",
            p(&tmp.path().join("run")),
        ])
    };
    let out = base(&s.join("missing.json"));
    assert_eq!(out.status.code(), Some(2));

    fs::write(s.join("src/scale8.semf"), b"JUNKJUNKJUNK").unwrap();
    let out = base(&s.join("cam_ref.json"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SEMF"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("scene");
    synth(&s, &["--points", "30"]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# test\niters = 2\nseed = 9\n").unwrap();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["match", "--scene", p(&s), "--config", p(&cfg), "--out"];
        let dir = tmp.path().join(out);
        let dir = dir.to_str().unwrap().to_string();
        args.push(&dir);
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_sem"))
            .args(&args)
            .env_remove("SEM_SEED")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        json(&tmp.path().join(out).join("report.json"))
    };
    let from_file = run(&[], "a");
    assert_eq!(from_file["iterations"].as_array().unwrap().len(), 2);
    assert!(from_file["config"].as_str().unwrap().contains("seed = 9"));
    let overridden = run(&["--iters", "1", "--seed", "4"], "b");
    assert_eq!(overridden["iterations"].as_array().unwrap().len(), 1);
    assert!(overridden["config"].as_str().unwrap().contains("seed = 4"));

    fs::write(&cfg, "iters = lots\n").unwrap();
    let out = sem(&[
        "match",
        "--scene",
        p(&s),
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("scene");
    synth(&s, &["--points", "30"]);
    let out = Command::new(env!("CARGO_BIN_EXE_sem"))
        .args([
            "match",
            "--scene",
            p(&s),
            "--iters",
            "1",
            "--out",
            p(&tmp.path().join("r")),
        ])
        .env("SEM_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(json(&tmp.path().join("r/report.json"))["config"]
        .as_str()
        .unwrap()
        .contains("seed = 77"));
}

fn eval(pred: &Path, scene: &Path) -> Value {
    let out = sem(&["eval", "--pred", p(pred), "--scene", p(scene)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &["--seed", "4"]);
    let m = eval(&tmp.path().join("gt.tsv"), tmp.path());
    let s = &m["scenes"][0];
    assert_eq!(s["precision"], 1.0);
    assert_eq!(s["recall"], 1.0);
    assert!(s["rotation_error_deg"].as_f64().unwrap() < 0.01);
    assert!(s["translation_error_deg"].as_f64().unwrap() < 0.01);
    assert!(m["pose_auc"]["5"].as_f64().unwrap() > 0.99);
}

#[test]
fn eval_of_empty_prediction_is_flagged() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &[]);
    let header = fs::read_to_string(tmp.path().join("gt.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let pred = tmp.path().join("empty.tsv");
    fs::write(&pred, header + "\n").unwrap();
    let m = eval(&pred, tmp.path());
    let s = &m["scenes"][0];
    assert_eq!(s["precision"], 0.0);
    assert_eq!(s["recall"], 0.0);
    assert_eq!(s["empty_prediction"], true);
}

#[test]
fn eval_matches_brute_force_recount() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &["--seed", "8"]);
    let gt = rows(&tmp.path().join("gt.tsv"));
    // Keep every other GT row, perturb a third of those off their cell, add junk.
    let mut pred: Vec<[f64; 6]> = Vec::new();
    for (k, r) in gt.iter().enumerate().filter(|(k, _)| k % 2 == 0) {
        let mut r = *r;
        if k % 3 == 0 {
            r[2] = (r[2] + 40.0) % 256.0;
        }
        pred.push(r);
    }
    pred.push([1.0, 1.0, 250.0, 250.0, 0.5, 0.1]);
    pred.reverse();
    let body: String = pred
        .iter()
        .map(|r| r.map(|v| v.to_string()).join("\t") + "\n")
        .collect();
    let header = fs::read_to_string(tmp.path().join("gt.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let path = tmp.path().join("pred.tsv");
    fs::write(&path, format!("{header}\n{body}")).unwrap();

    let cell = |r: &[f64; 6]| {
        (
            (r[0] / 8.0) as usize,
            (r[1] / 8.0) as usize,
            (r[2] / 8.0) as usize,
            (r[3] / 8.0) as usize,
        )
    };
    let gt_cells: HashSet<_> = gt.iter().map(cell).collect();
    let pred_cells: HashSet<_> = pred.iter().map(cell).collect();
    let tp = pred_cells.intersection(&gt_cells).count() as f64;

    let s = &eval(&path, tmp.path())["scenes"][0];
    assert!((s["precision"].as_f64().unwrap() - tp / pred_cells.len() as f64).abs() < 1e-12);
    assert!((s["recall"].as_f64().unwrap() - tp / gt_cells.len() as f64).abs() < 1e-12);
}

#[test]
fn eval_rejects_bad_schema() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &[]);
    let pred = tmp.path().join("bad.tsv");
    fs::write(&pred, "a,b,c\n1,2,3\n").unwrap();
    let out = sem(&["eval", "--pred", p(&pred), "--scene", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn viz(scene: &Path, matches: &Path, extra: &[&str], out: &Path) -> String {
    let (cam_ref, cam_src) = (scene.join("cam_ref.json"), scene.join("cam_src.json"));
    let mut args = vec![
        "viz",
        "--cam-ref",
        p(&cam_ref),
        "--cam-src",
        p(&cam_src),
        "--matches",
        p(matches),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    let o = sem(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read_to_string(out).unwrap()
}

#[test]
fn viz_draws_one_line_per_match() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &[]);
    let header = fs::read_to_string(tmp.path().join("gt.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let empty = tmp.path().join("none.tsv");
    fs::write(&empty, format!("{header}\n")).unwrap();
    let svg = viz(tmp.path(), &empty, &[], &tmp.path().join("a.svg"));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"panel\"").count(), 2);
    assert_eq!(svg.matches("<line").count(), 0);

    let one = tmp.path().join("one.tsv");
    fs::write(&one, format!("{header}\n10\t20\t30\t40\t0.9\t0.5\n")).unwrap();
    let svg = viz(tmp.path(), &one, &[], &tmp.path().join("b.svg"));
    assert_eq!(svg.matches("<line").count(), 1);
    assert_eq!(svg, viz(tmp.path(), &one, &[], &tmp.path().join("c.svg")));
}

#[test]
fn viz_band_matches_independent_rasterization() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &["--seed", "6", "--rotation", "15"]);
    let pose = json(&tmp.path().join("pose.json"));
    let cam = json(&tmp.path().join("cam_ref.json"));
    let f = |v: &Value| v.as_f64().unwrap();
    let r: Vec<f64> = pose["R"].as_array().unwrap().iter().map(f).collect();
    let t: Vec<f64> = pose["T"].as_array().unwrap().iter().map(f).collect();
    let k = Matrix3::new(
        f(&cam["fx"]),
        0.0,
        f(&cam["cx"]),
        0.0,
        f(&cam["fy"]),
        f(&cam["cy"]),
        0.0,
        0.0,
        1.0,
    );
    let tx = Matrix3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0);
    let kinv = k.try_inverse().unwrap();
    let fm = kinv.transpose() * tx * Matrix3::from_row_slice(&r) * kinv;

    let header = fs::read_to_string(tmp.path().join("gt.tsv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let none = tmp.path().join("none.tsv");
    fs::write(&none, format!("{header}\n")).unwrap();
    for (qx, qy) in [(100.0, 60.0), (20.0, 200.0)] {
        let q = format!("{qx},{qy}");
        let s0 = 2.0;
        let svg = viz(
            tmp.path(),
            &none,
            &["--pose", p(&tmp.path().join("pose.json")), "--query", &q, "--s0", "2"],
            &tmp.path().join("band.svg"),
        );
        // Query snaps to its cell center; cells count when their center is within s0 cells.
        let c = Vector3::new(
            (qx / 8.0f64).floor() * 8.0 + 4.0,
            (qy / 8.0f64).floor() * 8.0 + 4.0,
            1.0,
        );
        let l = fm * c;
        let n = (l.x * l.x + l.y * l.y).sqrt();
        let mut expected = 0;
        for cy in 0..32 {
            for cx in 0..32 {
                let (x, y) = (cx as f64 * 8.0 + 4.0, cy as f64 * 8.0 + 4.0);
                if (l.x * x + l.y * y + l.z).abs() / n / 8.0 <= s0 {
                    expected += 1;
                }
            }
        }
        assert!(expected > 0);
        assert_eq!(svg.matches("class=\"band\"").count(), expected);
    }
}

#[test]
fn eval_and_viz_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), &["--seed", "9"]);
    let gt = tmp.path().join("gt.tsv");
    let a = sem(&["eval", "--pred", p(&gt), "--scene", p(tmp.path())]);
    let b = sem(&["eval", "--pred", p(&gt), "--scene", p(tmp.path())]);
    assert_eq!(a.stdout, b.stdout);
    let x = viz(tmp.path(), &gt, &[], &tmp.path().join("x.svg"));
    assert_eq!(x, viz(tmp.path(), &gt, &[], &tmp.path().join("y.svg")));
}

#[test]
fn params_file_reproduces_builtin_weights() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("scene");
    synth(&s, &["--points", "30"]);
    let params = tmp.path().join("model.semp");
    assert!(sem(&["params", "--out", p(&params)]).status.success());
    assert_eq!(&fs::read(&params).unwrap()[..4], b"SEMP");
    for (dir, extra) in [("a", vec![]), ("b", vec!["--params", p(&params)])] {
        let mut args = vec!["match", "--scene", p(&s), "--iters", "1", "--out"];
        let out = tmp.path().join(dir);
        let out = out.to_str().unwrap().to_string();
        args.push(&out);
        args.extend(extra);
        assert!(sem(&args).status.success());
    }
    assert_eq!(
        fs::read(tmp.path().join("a/matches.tsv")).unwrap(),
        fs::read(tmp.path().join("b/matches.tsv")).unwrap()
    );
}
