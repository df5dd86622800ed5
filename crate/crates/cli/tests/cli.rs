use std::path::Path;
use std::process::{Command, Output};

use platerim_core::evalsuite::{records_to_csv, EvalRecord, Outcome};
use platerim_core::victims::CameraPose;

const SMALL: &str = r#"{
  "render": {"height": 64, "width": 64},
  "victims": {"det_epochs": 4, "ocr_epochs": 2, "accuracy_floor": 0.0},
  "train": {"epochs": 2, "batch": 8, "patch_h": 16, "patch_w": 32},
  "stats": {"n_perm": 200}
}"#;

fn platerim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platerim"))
        .current_dir(dir)
        .env_remove("PLATERIM_OUTPUT_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = platerim(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// The final stderr line as JSON.
fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr).to_string();
    serde_json::from_str(text.lines().last().unwrap()).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

#[test]
fn render_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["render-synthetic", "--count", "100", "--seed", "7", "--out", "a"]);
    ok(dir.path(), &["render-synthetic", "--count", "100", "--seed", "7", "--out", "b"]);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(std::fs::read_dir(dir.path().join("a/images")).unwrap().count(), 100);
    let rc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["seed"], 7);
    assert_eq!(rc["command"], "render-synthetic");
    ok(dir.path(), &["render-synthetic", "--count", "100", "--seed", "8", "--out", "c"]);
    assert_ne!(read("a"), read("c"));
}

#[test]
fn usage_errors_exit_2_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = platerim(dir.path(), &["render-synthetic", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
    let out = platerim(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = platerim(dir.path(), &["label-serve", "--manifest", "m.json", "--host", "0.0.0.0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("--allow-remote"));
    assert!(platerim(dir.path(), &["--help"]).status.success());
    assert!(platerim(dir.path(), &["train", "--help"]).status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_inputs_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("v.spvw"), b"junk").unwrap();
    let out = platerim(dir.path(), &["train", "--dataset", "missing.json", "--victims", "v.spvw", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert!(matches!(err["error"].as_str(), Some("io" | "format")), "{err}");
    assert!(!dir.path().join("run").exists());

    let out = platerim(dir.path(), &["stats", "--eval-csv", "nope.csv", "--out", "s"]);
    assert_eq!(error_line(&out)["error"], "io");
    assert!(!dir.path().join("s").exists());

    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epochz": 1}}"#).unwrap();
    let out = platerim(dir.path(), &["--config", "bad.json", "render-synthetic", "--out", "r"]);
    assert_eq!(error_line(&out)["error"], "argument");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn output_root_override() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_platerim"))
        .current_dir(dir.path())
        .env("PLATERIM_OUTPUT_ROOT", &root)
        .args(["render-synthetic", "--count", "2", "--out", "ds"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("ds/manifest.json").is_file());
    assert!(!dir.path().join("ds").exists());
}

fn records(n: usize, offset: f64) -> Vec<EvalRecord> {
    (0..n)
        .map(|i| {
            let d = 1.8 + i as f64 / n as f64;
            EvalRecord {
                id: format!("r{i}"),
                pose: Some(CameraPose::new(d, -30.0 + 60.0 * ((i * 7) % n) as f64 / n as f64)),
                category: Outcome::CorrectRead,
                confidence: (offset - 0.2 * d).clamp(0.0, 1.0),
                ed_t: i % 3,
                ed_i: 4,
                decoded: "AB12CD3".into(),
            }
        })
        .collect()
}

#[test]
fn stats_from_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.csv"), records_to_csv(&records(30, 1.0)).unwrap()).unwrap();
    std::fs::write(dir.path().join("ctl.csv"), records_to_csv(&records(30, 1.2)).unwrap()).unwrap();
    ok(dir.path(), &["stats", "--eval-csv", "run.csv", "--control-csv", "ctl.csv", "--n-perm", "100", "--out", "st"]);
    let csv = std::fs::read_to_string(dir.path().join("st/stats.csv")).unwrap();
    assert!(csv.starts_with("X,Y,dCor,delta_alpha,R_alpha,d_dcor,d_R\n"));
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("st/control_stats.csv").is_file());
    let rc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("st/run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["input_hashes"].as_object().unwrap().len(), 2);
}

#[test]
fn artifacts_flow_between_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("small.json"), SMALL).unwrap();
    let c = ["--config", "small.json", "--seed", "4"];
    let run = |args: &[&str]| ok(p, &[&c[..], args].concat());
    run(&["render-synthetic", "--count", "20", "--test-count", "6", "--text", "KX47BR2", "--out", "ds"]);
    run(&["train-victims", "--count", "60", "--out", "vic"]);
    run(&["train", "--dataset", "ds/manifest.json", "--victims", "vic/victims.spvw", "--mode", "impersonate", "--out", "tr"]);
    for f in ["patch_best.spat", "patch_best.png", "patch_final.spat", "curve.csv", "train_report.json", "run_config.json"] {
        assert!(p.join("tr").join(f).is_file(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("tr/train_report.json")).unwrap()).unwrap();
    assert_eq!((report["train_images"].as_u64(), report["val_images"].as_u64()), (Some(16), Some(4)));
    assert_eq!(report["truth"], "KX47BR2");

    run(&["eval", "--dataset", "ds/manifest.json", "--victims", "vic/victims.spvw", "--patch", "tr/patch_best.spat", "--out", "ev"]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("ev/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["target"], report["target"]);
    assert_eq!(summary["attack"]["n"], 6);
    run(&["eval", "--dataset", "ds/manifest.json", "--victims", "vic/victims.spvw", "--patch", "tr/patch_best.spat", "--split", "val", "--out", "ev_val"]);

    run(&["stats", "--eval-csv", "ev/eval.csv", "--control-csv", "ev/control.csv", "--out", "st"]);
    assert!(p.join("st/stats.json").is_file());

    run(&["apply", "--patch", "tr/patch_best.spat", "--dataset", "ds/manifest.json", "--id", "syn00000", "--victims", "vic/victims.spvw", "--out", "ap"]);
    assert!(p.join("ap/applied.png").is_file() && p.join("ap/reading.json").is_file());
    run(&["apply", "--patch", "tr/patch_best.spat", "--image", "ds/images/syn00001.png", "--corners", "20,25,44,25,44,37,20,37", "--rho", "0.1", "--out", "ap2"]);
    let out = platerim(p, &["apply", "--patch", "tr/patch_best.spat", "--image", "ds/images/syn00001.png", "--corners", "1,2,3", "--out", "ap3"]);
    assert_eq!(out.status.code(), Some(2));

    run(&["ablate", "--dataset", "ds/manifest.json", "--victims", "vic/victims.spvw", "--epochs", "1", "--variants", "full,no_tv", "--out", "ab"]);
    let table = std::fs::read_to_string(p.join("ab/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(p.join("ab/no_tv/patch_final.spat").is_file());
    let out = platerim(p, &["ablate", "--dataset", "ds/manifest.json", "--victims", "vic/victims.spvw", "--variants", "none", "--out", "ab2"]);
    assert_eq!(out.status.code(), Some(2));
}
