use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cpest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpest")).args(args).output().unwrap()
}

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_shipped_scenarios() {
    for name in ["double_integrator.toml", "airplane.toml"] {
        let out = cpest(&["validate", path(&scenario(name))]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_input_exits_with_validation_code() {
    let out = cpest(&["validate", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = 3\n").unwrap();
    assert_eq!(cpest(&["validate", path(&bad)]).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_cpest"))
        .env("CPEST_THREADS", "zero")
        .args(["validate", path(&scenario("double_integrator.toml"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let di = scenario("double_integrator.toml");
    for method in ["naive", "ais"] {
        let out = Command::new(env!("CARGO_BIN_EXE_cpest"))
            .env("CPEST_THREADS", "1")
            .args(["estimate", path(&di), "--method", method, "--m", "400", "-o", path(dir.path())])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let json = std::fs::read_to_string(dir.path().join("result_ais.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v["estimate"]["p_hat"].is_number());

    let report = dir.path().join("report");
    let out = cpest(&[
        "report",
        path(&dir.path().join("result_naive.json")),
        path(&dir.path().join("result_ais.json")),
        "-o",
        path(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&report).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with(".svg")), "{files:?}");
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with(".csv")), "{files:?}");
}

#[test]
fn sequential_and_threaded_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let di = scenario("double_integrator.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cpest(&["--sequential", "estimate", path(&di), "--m", "300", "-o", path(&a)]);
    cpest(&["estimate", path(&di), "--m", "300", "-o", path(&b)]);
    let read = |d: &PathBuf| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("result_ais.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timings");
        v["estimate"].as_object_mut().unwrap().remove("wall_time");
        v
    };
    assert_eq!(read(&a), read(&b));
}
