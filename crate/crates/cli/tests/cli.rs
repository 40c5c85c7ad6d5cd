use std::path::Path;
use std::process::{Command, Output};

use psfuse::image::FloatImage;

fn psfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = psfuse(args);
    assert!(
        out.status.success(),
        "psfuse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Tiny budgets so a full run takes about a second.
const FAST: &str = r#"{
  "scene": {"views": 3, "resolution": 12, "gt_mesh_resolution": 24},
  "trainer": {
    "iterations": 3, "batch_size": 16, "warmup_iterations": 1,
    "sampling": {"coarse": 8, "importance_rounds": 1, "importance_per_round": 4},
    "field": {"sdf_hidden": [8, 8], "albedo_hidden": [8], "init_fit_steps": 0}
  },
  "pipeline": {"mesh_resolution": 16},
  "eval": {"spacing": 0.05}
}"#;

fn fast_config(dir: &Path) -> String {
    let path = dir.join("fast.json");
    std::fs::write(&path, FAST).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_views_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(&["synth", "--scene", "sphere", "--views", "12", "--res", "16", "--seed", "7", "--out", s(out)]);
        assert!(stdout.starts_with("seed 7 (generator seed "), "{stdout}");
    }
    for i in 0..12 {
        assert!(a.join(format!("view_{i:03}.json")).exists());
        let name = format!("view_{i:03}_normal.pfm");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert!(!a.join("view_012.json").exists());
}

#[test]
fn noisy_synth_has_nonzero_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("noisy");
    ok(&["synth", "--views", "2", "--res", "16", "--noise-deg", "5", "--trials", "100", "--out", s(&out)]);
    let u = FloatImage::read_pfm(&out.join("view_000_uncertainty.pfm")).unwrap();
    let positive: Vec<f32> = u.data().iter().copied().filter(|&x| x > 0.0).collect();
    assert!(!positive.is_empty());
    let mean = positive.iter().sum::<f32>() / positive.len() as f32;
    // Mean angle of 100 draws to their median at sigma = 5 deg is about 4 deg.
    assert!((2.0..7.0).contains(&mean), "{mean}");
}

#[test]
fn fuse_extract_and_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "synth", "--out", s(&data)]);
    let manifest = data.join("scene.json");
    let run = dir.path().join("run");
    ok(&[
        "--config", &cfg, "fuse", s(&manifest), "--iters", "4", "--lambda", "0.2", "--no-optimal-lighting", "--out",
        s(&run),
    ]);
    for f in ["checkpoint.ckpt", "mesh.obj", "report.json", "train_log.csv", "exclusion/view_000.pfm"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let effective = &report["effective_config"];
    assert_eq!(effective["trainer"]["iterations"], 4);
    assert_eq!(effective["trainer"]["eikonal_weight"], 0.2);
    assert_eq!(effective["pipeline"]["lighting"], "view-canonical");
    assert_eq!(report["iterations"], 4);

    let mesh = dir.path().join("extracted.ply");
    ok(&["extract", s(&run.join("checkpoint.ckpt")), "--scene", s(&manifest), "--res", "16", "--out", s(&mesh)]);
    assert!(mesh.exists());

    let gt = data.join("gt_mesh.ply");
    let eval_dir = dir.path().join("eval");
    let csv = ok(&["--config", &cfg, "eval", s(&gt), s(&gt), "--cameras", s(&manifest), "--out", s(&eval_dir)]);
    assert!(csv.starts_with("metric,segment,value"));
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["chamfer"]["chamfer"], 0.0);
    for f in metrics["fscores"].as_array().unwrap() {
        assert_eq!(f["fscore"], 1.0);
    }
    assert_eq!(metrics["mae_deg"], 0.0);
}

#[test]
fn eval_exclusions_drop_vertices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "synth", "--out", s(&data)]);
    let regions = dir.path().join("regions.json");
    std::fs::write(&regions, r#"{"spheres": [{"center": [0, 0, -0.5], "radius": 0.2}], "boxes": []}"#).unwrap();
    let gt = data.join("gt_mesh.ply");
    let out = dir.path().join("eval");
    ok(&["--config", &cfg, "eval", s(&gt), s(&gt), "--exclude", s(&regions), "--out", s(&out)]);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["excluded_gt_vertices"].as_u64().unwrap() > 0);
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let data = dir.path().join("data");
    ok(&["--config", &cfg, "synth", "--scene", "textured-blob", "--noise-deg", "5", "--trials", "10", "--out", s(&data)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["--config", &cfg, "--seed", "3", "ablate", s(&data.join("scene.json")), "--out", s(&out)]);
        std::fs::read_to_string(out.join("ablation.csv")).unwrap()
    };
    let table = run("ab1");
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["full", "no-reflectance", "no-optimal-lighting", "no-uncertainty"]) {
        assert!(row.starts_with(&format!("{name},ok,")), "{row}");
    }
    assert_eq!(table, run("ab2"));
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"trainer": {"iters": 5}}"#).unwrap();
    let out = psfuse(&["--config", s(&bad), "synth", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = psfuse(&["fuse", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let out = psfuse(&["synth", "--scene", "teapot", "--out", s(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
}
