use std::path::Path;
use std::process::{Command, Output};

fn mgclip(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mgclip")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "mgclip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RUN: &str = r#"{
    "encoder": {
        "patch_size": 8, "depth": 2, "dim": 16, "heads": 2,
        "text_depth": 1, "text_dim": 16, "text_heads": 2, "embed_dim": 16,
        "cluster_after": null
    },
    "steps": 4,
    "batch": 4,
    "cluster": false,
    "schedule": { "warmup_steps": 1 },
    "data": { "train_images": 64, "eval_images": 8 }
}"#;

#[test]
fn gen_data_stats_and_annotate() {
    let dir = tempfile::tempdir().unwrap();
    mgclip(&["gen-data", "--images", "20", "--seed", "3", "--out", path(dir.path())]);
    let records = dir.path().join("records.jsonl");
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 20);

    let stats_path = dir.path().join("stats.json");
    mgclip(&["stats", "--in", path(&records), "--out", path(&stats_path)]);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats_path).unwrap()).unwrap();
    assert_eq!(stats["images"], 20);
    let regions = stats["regions"].as_u64().unwrap();
    assert!(regions >= 20);

    let annotated = dir.path().join("annotated.jsonl");
    let out = mgclip(&[
        "annotate", "--in", path(&records), "--out", path(&annotated), "--conf", "0.3", "--nms-iou", "0.5", "--stability", "0.7",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("after stability"));
    let lines = std::fs::read_to_string(&annotated).unwrap();
    assert_eq!(lines.lines().count(), 20);
    for line in lines.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for r in rec["regions"].as_array().unwrap() {
            assert!(r["stability"].as_f64().unwrap() >= 0.7);
        }
    }
}

#[test]
fn same_seed_gives_same_records() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        mgclip(&["--seed", "9", "gen-data", "--images", "5", "--split", "eval", "--out", path(d.path())]);
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("records.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn train_eval_and_adapt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let run = dir.path().join("run");
    mgclip(&["train", "--config", path(&config), "--out", path(&run)]);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = run.join("checkpoint.umgm");
    assert!(ckpt.exists());

    let out = mgclip(&["eval", "--config", path(&config), "--checkpoint", path(&ckpt)]);
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["images"], 8);
    assert!((0.0..=1.0).contains(&m["i2t_r1"].as_f64().unwrap()));

    let adapt = dir.path().join("adapt");
    mgclip(&["adapt", "--base", path(&ckpt), "--steps", "3", "--heads-only", "--out", path(&adapt)]);
    assert_eq!(std::fs::read_to_string(adapt.join("metrics.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{ "stepz": 3 }"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mgclip"))
        .args(["train", "--config", path(&config), "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}
