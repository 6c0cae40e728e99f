mod common;

use std::path::Path;
use std::process::Command;

use common::tiny_config;

fn pmg(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pmg"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(pmg(dir.path(), &["run", "--config", bad.to_str().unwrap()]).0, 2);
    assert_eq!(pmg(dir.path(), &["run"]).0, 2);
    assert_eq!(pmg(dir.path(), &["ablate", "--which", "colour"]).0, 2);
    assert_eq!(pmg(dir.path(), &["eval-corr"]).0, 2);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.score.dsm.learning_rate = 1e6;
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(pmg(dir.path(), &["train-score", "--config", path.to_str().unwrap()]).0, 3);
}

#[test]
fn train_run_and_correlate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, tiny_config().to_json()).unwrap();
    let cfg = path.to_str().unwrap();
    assert_eq!(pmg(dir.path(), &["train-score", "--config", cfg]).0, 0);
    assert!(dir.path().join("score.pmgl").exists() && dir.path().join("score.json").exists());
    assert_eq!(pmg(dir.path(), &["gen-bench", "--config", cfg]).0, 0);
    let (code, stdout) = pmg(dir.path(), &["run", "--config", cfg, "--seed", "4"]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("SRCC "));
    assert_eq!(pmg(dir.path(), &["eval-corr", "--config", cfg]).0, 0);
    assert_eq!(pmg(dir.path(), &["ablate", "--which", "layers", "--config", cfg]).0, 0);
    for f in ["benchmark.csv", "report.json", "items.csv", "correlation.json", "ablation_layers.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 4);
}
