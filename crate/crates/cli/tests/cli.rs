use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("valid JSON")
}

/// A small synthetic dataset written by `synth`.
fn dataset() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, r#"{"synthetic": {"n_images": 12, "n_classes": 3}}"#).unwrap();
    let out = sos(&[
        "synth",
        "--dir",
        path(dir.path()),
        "--config",
        path(&cfg),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = sos(&[flag]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(sos(&["bogus"]).status.code(), Some(1));
    assert_eq!(sos(&["pipeline", "--preset", "imagenet"]).status.code(), Some(1));
}

#[test]
fn missing_file_exits_two() {
    let out = sos(&[
        "eval",
        "--manifest",
        "/nonexistent/m.json",
        "--detections",
        "/nonexistent/d.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_config_exits_one() {
    let d = dataset();
    let cfg = d.path().join("bad.json");
    for text in ["{", r#"{"mining": {"p": 3.0}}"#, r#"{"unknown": 1}"#] {
        std::fs::write(&cfg, text).unwrap();
        let out = sos(&[
            "mine",
            "--manifest",
            path(&d.path().join("manifest.json")),
            "--scores",
            path(&d.path().join("scores.jsonl")),
            "--config",
            path(&cfg),
        ]);
        assert_eq!(out.status.code(), Some(1), "{text}");
    }
}

#[test]
fn perfect_detections_score_one() {
    let d = dataset();
    let out = sos(&[
        "eval",
        "--manifest",
        path(&d.path().join("ground_truth.json")),
        "--detections",
        path(&d.path().join("ground_truth.jsonl")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out.stdout);
    assert_eq!(r["map50"], 1.0);
    assert_eq!(r["map5095"], 1.0);
}

#[test]
fn stage_chain() {
    let d = dataset();
    let p = |name: &str| d.path().join(name);
    let ok = |args: &[&str]| {
        let out = sos(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    let (manifest, scores) = (p("manifest.json"), p("scores.jsonl"));
    let small = p("steps.json");
    std::fs::write(
        &small,
        r#"{"training": {"fsod_steps": 20, "ssod_steps": 10}, "split_k": 6}"#,
    )
    .unwrap();

    ok(&[
        "mine",
        "--manifest",
        path(&manifest),
        "--scores",
        path(&scores),
        "--out",
        path(&p("seeds.jsonl")),
    ]);
    ok(&[
        "pgf",
        "--manifest",
        path(&manifest),
        "--detections",
        path(&p("seeds.jsonl")),
        "--out",
        path(&p("pseudo.json")),
    ]);
    let pseudo = json(&std::fs::read(p("pseudo.json")).unwrap());
    assert!(pseudo["images"]
        .as_array()
        .unwrap()
        .iter()
        .all(|im| im["pseudo_gt"].is_array()));

    ok(&[
        "roi-losses",
        "--manifest",
        path(&p("pseudo.json")),
        "--scores",
        path(&scores),
        "--config",
        path(&small),
        "--out",
        path(&p("losses.jsonl")),
    ]);
    let too_many = sos(&[
        "split",
        "--manifest",
        path(&p("pseudo.json")),
        "--losses",
        path(&p("losses.jsonl")),
        "--k",
        "13",
    ]);
    assert_eq!(too_many.status.code(), Some(1));
    ok(&[
        "split",
        "--manifest",
        path(&p("pseudo.json")),
        "--losses",
        path(&p("losses.jsonl")),
        "--config",
        path(&small),
        "--out",
        path(&p("split.json")),
    ]);
    let split = json(&std::fs::read(p("split.json")).unwrap());
    let labeled = split["images"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|im| im["split"] == "labeled")
        .count();
    assert_eq!(labeled, 6);

    let ssod = ok(&[
        "ssod-sim",
        "--manifest",
        path(&p("split.json")),
        "--scores",
        path(&scores),
        "--config",
        path(&small),
        "--detections-out",
        path(&p("dets.jsonl")),
    ]);
    assert_eq!(json(&ssod.stdout)["trace"].as_array().unwrap().len(), 10);
    let eval = ok(&[
        "eval",
        "--manifest",
        path(&p("ground_truth.json")),
        "--detections",
        path(&p("dets.jsonl")),
    ]);
    let m = json(&eval.stdout)["map50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));
}

#[test]
fn pipeline_output_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"synthetic": {"n_images": 20, "n_test_images": 10}, "split_k": 10, "training": {"fsod_steps": 20, "ssod_steps": 10}}"#,
    )
    .unwrap();
    let run = |jobs: &str| {
        let out = sos(&["pipeline", "--config", path(&cfg), "--seed", "2", "--jobs", jobs]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let first = run("1");
    assert_eq!(first, run("1"));
    assert_eq!(first, run("3"));
    let r = json(&first);
    assert_eq!(r["preset"], "synthetic");
    assert_eq!(r["stages"].as_array().unwrap().len(), 3);
}
