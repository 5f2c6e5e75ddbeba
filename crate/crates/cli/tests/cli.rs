use std::path::Path;
use std::process::{Command, Output};

fn lava(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lava"))
        .args(args)
        .current_dir(dir)
        .env_remove("LAVA_TEST_KEY")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {:?}", out.stdout))
}

const SMALL: &str = r#"{
  "age_group": "neonate",
  "out": "run",
  "synth": {
    "sites": [
      {"name": "A", "n": 60, "prevalence": [0.3, 0.2, 0.2, 0.1, 0.1, 0.1]},
      {"name": "B", "n": 60, "prevalence": [0.1, 0.1, 0.2, 0.2, 0.2, 0.2]},
      {"name": "C", "n": 60, "prevalence": [0.2, 0.2, 0.2, 0.2, 0.1, 0.1]}
    ],
    "oracle_accuracy": 0.7
  },
  "data": {"predictions": ["run/oracle.jsonl"]},
  "llm": {"api_key_env": "LAVA_TEST_KEY"}
}"#;

#[test]
fn synth_then_evaluate_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let out = lava(dir.path(), &["synth", "--config", "c.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["records"], 180);

    let out = lava(dir.path(), &["evaluate", "--config", "c.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert_eq!(summary["folds"], 3);
    let run = dir.path().join("run");
    for f in ["reports.json", "folds.json", "tables.txt", "manifest-synth.json", "manifest-evaluate.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest-evaluate.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "evaluate");
    let inputs = manifest["inputs"].as_object().unwrap();
    assert!(inputs.contains_key("run/records.csv") && inputs.contains_key("run/oracle.jsonl"));
    assert!(inputs.values().all(|h| h.as_str().is_some_and(|s| s.len() == 64)));

    let out = lava(dir.path(), &["report", "--config", "c.json"]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(run.join("report.txt")).unwrap().contains("Pooled across sites"));
}

#[test]
fn manifest_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    assert!(lava(dir.path(), &["synth", "--config", "c.json"]).status.success());
    assert!(lava(dir.path(), &["evaluate", "--config", "c.json", "--seed", "5"]).status.success());
    let run = dir.path().join("run");
    let first = std::fs::read(run.join("reports.json")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest-evaluate.json")).unwrap()).unwrap();
    std::fs::write(dir.path().join("again.json"), manifest["config"].to_string()).unwrap();
    std::fs::remove_file(run.join("reports.json")).unwrap();
    let out = lava(dir.path(), &["evaluate", "--config", "again.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first, std::fs::read(run.join("reports.json")).unwrap());
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = lava(dir.path(), &["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = lava(dir.path(), &["synth", "--set", "harness.nope=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn missing_api_key_with_cold_cache_exits_two_naming_variable() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    assert!(lava(dir.path(), &["synth", "--config", "c.json"]).status.success());
    let out = lava(dir.path(), &["predict-llm", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LAVA_TEST_KEY"));
    assert!(!dir.path().join("run/llm.jsonl").exists());
}

#[test]
fn embedding_and_combination_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    assert!(lava(dir.path(), &["synth", "--config", "c.json"]).status.success());
    let out = lava(dir.path(), &["train-embed", "--config", "c.json", "--set", "harness.lambda_grid=[0.1]"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["lambda"], 0.1);
    assert!(lava(dir.path(), &["predict-embed", "--config", "c.json"]).status.success());

    let out = lava(dir.path(), &["calibrate", "--config", "c.json", "--set", "calibration.predictions=run/oracle.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/oracle-calibrated.jsonl").exists());

    let out = lava(
        dir.path(),
        &["ensemble", "--config", "c.json", "--set", r#"data.predictions=["run/oracle.jsonl","run/embed.jsonl"]"#],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = stdout_json(&out)["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum::<f64>();
    assert!((weights - 1.0).abs() < 1e-9);
}
