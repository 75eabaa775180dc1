use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gritvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gritvq"))
        .args(args)
        .output()
        .unwrap()
}

fn dump(dir: &Path, name: &str, args: &[&str]) -> String {
    let mut all = vec!["train", "--dump-config", "--steps", "200"];
    all.extend_from_slice(args);
    let out = gritvq(&all);
    assert!(out.status.success());
    let path = dir.join(name);
    fs::write(&path, &out.stdout).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = gritvq(&[
        "train",
        "--steps",
        "200",
        "--seed",
        "3",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["config.json", "codebook.json", "metrics.csv", "result.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let out = gritvq(&["inspect", "--json", run.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["k"], 64);
    assert_eq!(v["counts"].as_array().unwrap().len(), 64);
    assert!(v["sigma_max_w"].as_f64().unwrap() <= v["tau_w"].as_f64().unwrap() + 1e-6);
}

#[test]
fn config_file_round_trips_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dump(
        dir.path(),
        "ste.json",
        &["--method", "ste", "--preset", "well-separated"],
    );
    let out = gritvq(&["train", "--config", &cfg, "--dump-config"]);
    assert_eq!(fs::read(&cfg).unwrap(), out.stdout);
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dump(dir.path(), "a.json", &[]);
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["k"] = serde_json::json!(1);
    fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(gritvq(&["train", "--config", &cfg]).status.code(), Some(2));

    v["k"] = serde_json::json!(64);
    v["unexpected"] = serde_json::json!(true);
    fs::write(&cfg, v.to_string()).unwrap();
    assert_eq!(gritvq(&["train", "--config", &cfg]).status.code(), Some(2));

    assert_eq!(
        gritvq(&["gradcheck", "--family", "Nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn diverging_run_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dump(dir.path(), "a.json", &["--method", "ste"]);
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["lr_e"] = serde_json::json!(1e300);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = gritvq(&["train", "--config", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn compare_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let a = dump(dir.path(), "a.json", &["--method", "ste"]);
    let b = dump(dir.path(), "b.json", &[]);
    let out_dir = dir.path().join("cmp");
    let out = gritvq(&[
        "compare",
        "--configs",
        &a,
        &b,
        "--seeds",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    // header plus methods × metrics
    assert_eq!(summary.lines().count(), 1 + 2 * 5);
}

#[test]
fn gradcheck_and_bench_run() {
    let out = gritvq(&[
        "gradcheck",
        "--family",
        "euclidean",
        "--transform",
        "identity",
        "--trials",
        "10",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let out = gritvq(&[
        "gradcheck",
        "--params",
        "--family",
        "softclip",
        "--transform",
        "linearlowrank",
        "--trials",
        "10",
    ]);
    assert!(out.status.success());
    let out = gritvq(&[
        "bench",
        "--k",
        "64,128",
        "--d",
        "8",
        "--r",
        "4",
        "--repeats",
        "2",
        "--json",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(gritvq(&["bench", "--k", "128,64"]).status.code(), Some(2));
}

#[test]
fn impossible_tolerance_fails_the_check() {
    let out = gritvq(&[
        "gradcheck",
        "--family",
        "huber",
        "--transform",
        "identity",
        "--trials",
        "5",
        "--tolerance",
        "1e-30",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
