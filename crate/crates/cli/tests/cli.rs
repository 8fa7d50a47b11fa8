use std::path::Path;
use std::process::{Command, Output};

use moldsense::model::ModelConfig;
use moldsense::persist::write_json;

fn moldsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moldsense")).args(args).output().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn tiny_gen(out: &Path, seed: &str) -> Output {
    moldsense(&[
        "gen",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
        "--days",
        "3",
        "--per-class-per-day",
        "5",
        "--image-side",
        "24",
    ])
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("d"), dir.path().join("d2"));
    assert!(tiny_gen(&a, "1").status.success());
    assert!(tiny_gen(&b, "1").status.success());
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 2 + 2 * 45);
    assert_eq!(ta, tb);
}

#[test]
fn eval_scores_the_reference_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pred.csv");
    let mut text = String::from("truth,pred\n");
    for i in 0..900 {
        let t = i / 300;
        let p = if i == 0 { 2 } else { t };
        text.push_str(&format!("{t},{p}\n"));
    }
    std::fs::write(&csv, text).unwrap();
    let report = dir.path().join("report.json");
    let out = moldsense(&["eval", "--predictions", csv.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"accuracy\": 99.89,"), "{json}");
    assert!(json.contains("\"Expired\": {\"precision\": 100.00, \"recall\": 99.67, \"f1\": 99.83}"));
}

#[test]
fn argument_errors_exit_two_with_usage() {
    let out = moldsense(&["gen", "--out", "x", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert!(out.stdout.is_empty());

    assert_eq!(moldsense(&["frobnicate"]).status.code(), Some(2));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_moldsense"))
        .args(["eval", "--predictions", "missing.csv"])
        .env("MOLDSENSE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(2));
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = moldsense(&["eval", "--predictions", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "truth,pred\n0,5\n").unwrap();
    assert_eq!(moldsense(&["eval", "--predictions", bad.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn train_eval_gradcam_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(tiny_gen(&data, "4").status.success());
    let cfg = dir.path().join("micro.json");
    write_json(&cfg, &ModelConfig::micro()).unwrap();
    let run = dir.path().join("run");
    let d = data.to_str().unwrap();
    let out = moldsense(&[
        "train",
        "--data",
        d,
        "--out",
        run.to_str().unwrap(),
        "--model-config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(run.join("model.fdra.json").exists());

    let ckpt = run.join("model.fdra");
    let out = moldsense(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--split", "val"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("{\n  \"accuracy\": "));

    let cams = dir.path().join("cams");
    let out = moldsense(&[
        "gradcam",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        d,
        "--id",
        "35",
        "--out",
        cams.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["heatmap_35.ppm", "overlay_35.ppm"] {
        assert!(std::fs::read(cams.join(name)).unwrap().starts_with(b"P6\n24 24\n255\n"));
    }
    let out = moldsense(&["gradcam", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--id", "9999", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}
