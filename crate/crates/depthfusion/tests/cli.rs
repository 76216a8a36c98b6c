use std::path::Path;
use std::process::Command;

use depthfusion::output::tree_hash;
use serde_json::Value;

const TINY: &str = "preset = \"far_heavy\"
[grid]
width = 8
height = 8
cell_size = 5.0
[model]
channels = 8
voxel_channels = 4
proposals = 3
[corpus]
scenes = 2
distance_max = 18.0
placement = \"uniform\"
image_rows = 8
image_cols = 16
[train]
steps = 3
[experiment]
seeds = 1
profile_edges = [0.0, 10.0, 20.0, 40.0]
[stats]
scenes = 5
";

fn depthfusion(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> (i32, Value) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_depthfusion"));
    cmd.arg("--config").arg(&cfg).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    let line = String::from_utf8(out.stdout).unwrap();
    let json = serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line:?}"));
    (out.status.code().unwrap(), json)
}

#[test]
fn successful_verbs_report_ok_and_write_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, json) = depthfusion(dir.path(), &["--out", out.to_str().unwrap(), "dump-depth"], &[]);
    assert_eq!((code, json["status"].as_str()), (0, Some("ok")));
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["verb"], "dump-depth");
    assert_eq!(manifest["seed"], 0);
    let config = std::fs::read(out.join("config.toml")).unwrap();
    assert_eq!(manifest["config_sha256"], depthfusion::output::sha256_hex(&config));
    let csv = std::fs::read_to_string(out.join("depth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 64);
    assert!(csv.lines().any(|l| l == "4,4,0.0"));
}

#[test]
fn failures_print_error_json_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let o = o.to_str().unwrap();
    let (code, json) = depthfusion(dir.path(), &["--out", o, "stats"], &[("DEPTHFUSION_MODEL_HEADS", "3")]);
    assert_eq!((code, json["error"].as_str()), (1, Some("config")));
    assert!(json["message"].as_str().unwrap().contains("heads"));

    let (code, json) = depthfusion(dir.path(), &["--out", o, "ablate", "--factor", "nope"], &[]);
    assert_eq!((code, json["error"].as_str()), (1, Some("config")));

    let (code, json) = depthfusion(dir.path(), &["frobnicate"], &[]);
    assert_eq!((code, json["error"].as_str()), (2, Some("usage")));

    let missing = dir.path().join("missing");
    let (code, json) = depthfusion(dir.path(), &["--out", o, "run", "--scene-dir", missing.to_str().unwrap()], &[]);
    assert_eq!((code, json["error"].as_str(), json["stage"].as_str()), (1, Some("io"), Some("load_scene")));

    let (code, json) = depthfusion(dir.path(), &["--out", o, "run", "--stages", "fused,nonsense"], &[]);
    assert_eq!((code, json["error"].as_str()), (1, Some("config")));
}

#[test]
fn divergent_training_leaves_a_diagnostic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let (code, json) = depthfusion(dir.path(), &["--out", o.to_str().unwrap(), "train"], &[("DEPTHFUSION_TRAIN_LEARNING_RATE", "1e300")]);
    assert_eq!((code, json["error"].as_str(), json["stage"].as_str()), (1, Some("numeric"), Some("train")));
    let diag: Value = serde_json::from_slice(&std::fs::read(o.join("diagnostic.json")).unwrap()).unwrap();
    assert_eq!(diag["error"]["error"], "numeric");
    let done = diag["losses"].as_array().unwrap().len();
    assert_eq!(diag["step"].as_u64().unwrap() as usize, done);
    assert_eq!(std::fs::read_to_string(o.join("loss.csv")).unwrap().lines().count(), 1 + done);
    assert!(!o.join("checkpoint/model.bin").exists());
}

#[test]
fn trained_checkpoint_feeds_run_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    assert_eq!(depthfusion(dir.path(), &["--out", t.to_str().unwrap(), "train"], &[]).0, 0);
    assert_eq!(std::fs::read_to_string(t.join("loss.csv")).unwrap().lines().count(), 4);
    let stem = t.join("checkpoint/model");
    let r = dir.path().join("r");
    let (code, _) = depthfusion(dir.path(), &["--out", r.to_str().unwrap(), "run", "--checkpoint", stem.to_str().unwrap(), "--stages", "head,fused"], &[]);
    assert_eq!(code, 0);
    let mut stages: Vec<_> = std::fs::read_dir(r.join("stages")).unwrap().map(|e| e.unwrap().file_name()).collect();
    stages.sort();
    assert_eq!(stages, ["fused.bin", "head.bin"]);
    let head = depthfusion::format::load_tensor(&r.join("stages/head.bin")).unwrap();
    assert_eq!(head.shape(), &[8, 8, 3 + 7]);

    let p = dir.path().join("p");
    let (code, _) = depthfusion(dir.path(), &["--out", p.to_str().unwrap(), "attn-profile", "--checkpoint", stem.to_str().unwrap()], &[]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(p.join("attention_profile.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "condition,bin_low,bin_high,mean_weight,cells");
    assert_eq!(csv.lines().filter(|l| l.starts_with("clean,")).count(), 3);
    assert_eq!(csv.lines().filter(|l| l.starts_with("image_feature_noise,")).count(), 3);

    let (code, json) = depthfusion(dir.path(), &["--out", p.to_str().unwrap(), "run", "--checkpoint", stem.to_str().unwrap()], &[("DEPTHFUSION_MODEL_CHANNELS", "16")]);
    assert_eq!((code, json["stage"].as_str()), (1, Some("load_checkpoint")));
}

#[test]
fn exported_scene_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(depthfusion(dir.path(), &["--out", a.to_str().unwrap(), "run"], &[]).0, 0);
    let b = dir.path().join("b");
    let scene = a.join("scene");
    assert_eq!(depthfusion(dir.path(), &["--out", b.to_str().unwrap(), "run", "--scene-dir", scene.to_str().unwrap()], &[]).0, 0);
    let c = dir.path().join("c");
    assert_eq!(depthfusion(dir.path(), &["--out", c.to_str().unwrap(), "run", "--scene-dir", scene.to_str().unwrap()], &[]).0, 0);
    assert_eq!(tree_hash(&b.join("stages")).unwrap(), tree_hash(&c.join("stages")).unwrap());
    assert!(b.join("detections.json").exists());
}

#[test]
fn stats_csv_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    assert_eq!(depthfusion(dir.path(), &["--out", o.to_str().unwrap(), "stats"], &[]).0, 0);
    let csv = std::fs::read_to_string(o.join("stats.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bin_low,bin_high,mean_points,mean_pixels,n_objects");
    assert_eq!(csv.lines().count(), 1 + 6);
}
