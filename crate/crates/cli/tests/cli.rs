use std::path::Path;
use std::process::{Command, Output};

fn boltzgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boltzgrad")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, name: &str, config: serde_json::Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_chaos() -> serde_json::Value {
    serde_json::json!({
        "schema_version": 1,
        "scenario": "chaos",
        "seed": 5,
        "params": {"particles": [16, 32], "replicas": 40, "probe_pairs": 10}
    })
}

#[test]
fn lists_every_scenario() {
    let out = boltzgrad(&["list-scenarios"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["lanford", "loschmidt", "concatenation", "badset-scaling", "chaos", "counterexample", "tree-vs-solver", "htheorem"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn validate_accepts_good_and_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.json", small_chaos());
    assert_eq!(boltzgrad(&["validate", "--config", &good]).status.code(), Some(0));

    let mut typo = small_chaos();
    typo["params"]["replica"] = 10.into();
    let typo = write_config(dir.path(), "typo.json", typo);
    assert_eq!(boltzgrad(&["validate", "--config", &typo]).status.code(), Some(2));

    let mut dim = small_chaos();
    dim["dim"] = 4.into();
    let dim = write_config(dir.path(), "dim.json", dim);
    assert_eq!(boltzgrad(&["validate", "--config", &dim]).status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    assert_eq!(boltzgrad(&["validate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "chaos.json", small_chaos());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = boltzgrad(&["run", "--config", &config, "--out", a.to_str().unwrap(), "--threads", "1"]);
    let second = boltzgrad(&["run", "--config", &config, "--out", b.to_str().unwrap(), "--threads", "2"]);
    assert!(first.status.code().is_some_and(|c| c == 0 || c == 4), "{first:?}");
    assert_eq!(first.status.code(), second.status.code());
    let mut compared = 0;
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_str().unwrap();
        if name == "manifest.json" {
            continue;
        }
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
        compared += 1;
    }
    assert!(compared >= 6);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "chaos.json", small_chaos());
    let out = dir.path().join("run");
    let status = boltzgrad(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "9"]).status;
    assert!(status.code().is_some_and(|c| c == 0 || c == 4));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
}

#[test]
fn failed_assertion_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "loschmidt.json",
        serde_json::json!({
            "schema_version": 1,
            "scenario": "loschmidt",
            "seed": 3,
            "params": {"particles": 16, "replicas": 20, "checkpoints": 2, "significance": 1e9}
        }),
    );
    let out = dir.path().join("run");
    let result = boltzgrad(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(4));
    assert!(String::from_utf8(result.stdout).unwrap().contains("FAIL kinetic_entropy_fails_to_retrace"));
    assert!(out.join("summary.json").exists());
}

#[test]
fn numerical_pathology_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    // a step far beyond the stability bound of the explicit solver
    let config = write_config(
        dir.path(),
        "htheorem.json",
        serde_json::json!({
            "schema_version": 1,
            "scenario": "htheorem",
            "seed": 3,
            "params": {"t_final": 2.0, "solver": {"nodes": 12, "directions": 8, "dt": 1.0}}
        }),
    );
    let out = dir.path().join("run");
    let result = boltzgrad(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(3), "{result:?}");
}

#[test]
fn minimal_lanford_run_lists_marginals() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "lanford.json",
        serde_json::json!({
            "schema_version": 1,
            "scenario": "lanford",
            "seed": 1,
            "dim": 2,
            "params": {"particles": [64], "replicas": 1000, "t": 0.05}
        }),
    );
    let out = dir.path().join("run");
    let result = boltzgrad(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(0), "{result:?}");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(files.contains(&"lanford_marginal_N64.csv"), "{files:?}");
    assert!(files.contains(&"summary.json"));
}
