//! End-to-end checks of the `metademod` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

fn metademod(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_metademod"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY_DEMOD: &str = r#"{"I_meta": 2, "R": 2, "R_te": 2, "n_te": 8, "n_te_batch": null,
    "I_star": 4, "n_star_te": 20, "test_frames": 2, "t_grid": [2]}"#;

#[test]
fn demodulation_pipeline_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY_DEMOD).unwrap();
    let sub = |name: &str, extra: &[&str]| {
        let mut args = vec![name, "--config", "tiny.json", "--task", "demod", "--seed", "4"];
        args.extend_from_slice(extra);
        metademod(&args, d)
    };
    sub("simulate", &["--role", "train", "--frames", "2", "--out", "train.jsonl"]);
    sub("simulate", &["--role", "test", "--out", "test.jsonl"]);
    assert_eq!(std::fs::read_to_string(d.join("test.jsonl")).unwrap().lines().count(), 2);
    for mode in ["freq", "bayes"] {
        let ck = format!("{mode}.json");
        let preds = format!("{mode}.csv");
        let rep = format!("{mode}_report");
        sub("meta-train", &["--mode", mode, "--frames", "train.jsonl", "--out", &ck]);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(&ck)).unwrap()).unwrap();
        assert_eq!(v["variant"], mode);
        assert_eq!(v["rho"].is_null(), mode == "freq");
        sub(
            "meta-test",
            &["--mode", mode, "--checkpoint", &ck, "--frames", "test.jsonl", "--out", &preds],
        );
        let rows = std::fs::read_to_string(d.join(&preds)).unwrap().lines().count();
        assert_eq!(rows, 1 + 2 * 20);
        let out = metademod(&["report", "--predictions", &preds, "--out", &rep], d);
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        let ser = summary["ser"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&ser));
        let rel = std::fs::read_to_string(d.join(&rep).join("reliability.csv")).unwrap();
        assert!(rel.starts_with("bin_lo,bin_hi,count,acc,conf"));
        assert_eq!(rel.lines().count(), 1 + 10);
    }
}

#[test]
fn checkpoint_of_the_wrong_variant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY_DEMOD).unwrap();
    let common = ["--config", "tiny.json", "--task", "demod"];
    let mut args = vec!["meta-train", "--mode", "freq", "--t", "2", "--out", "f.json"];
    args.extend_from_slice(&common);
    metademod(&args, d);
    let out = Command::new(env!("CARGO_BIN_EXE_metademod"))
        .args(["meta-test", "--mode", "bayes", "--checkpoint", "f.json", "--out", "p.csv"])
        .args(common)
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn print_config_resolves_overrides_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("o.json"), r#"{"budget": 6}"#).unwrap();
    let out = metademod(
        &["run", "--experiment", "eq_active_vs_passive", "--config", "o.json", "--print-config"],
        d,
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["budget"], 6);
    std::fs::write(d.join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_metademod"))
        .args(["run", "--experiment", "eq_active_vs_passive", "--config", "bad.json", "--print-config"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let unknown = Command::new(env!("CARGO_BIN_EXE_metademod"))
        .args(["run", "--experiment", "fig5", "--print-config"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!unknown.status.success());
}
