use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn otafl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otafl")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const CONFIG: &str = r#"{
    "model": { "layer_sizes": [2, 8, 3] },
    "dataset": { "synthetic": { "kind": "spirals", "classes": 3, "per_class": 30, "noise": 0.05 } },
    "federation": { "clients": 4, "rounds": ROUNDS, "batch_size": 8, "learning_rate": 0.1 },
    "seed": 3
}"#;

fn write_config(dir: &Path, rounds: usize) -> String {
    let path = dir.join("config.json");
    fs::write(&path, CONFIG.replace("ROUNDS", &rounds.to_string())).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = otafl(&[
            "gen-data", "--kind", "blobs", "--classes", "3", "--per-class", "100", "--dim", "2", "--seed", "7", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "N=300 d=2 C=3");
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 300);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
}

#[test]
fn gen_data_rejects_mismatched_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let o = otafl(&["gen-data", "--kind", "blobs", "--classes", "3", "--per-class", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = otafl(&["gen-data", "--kind", "spirals", "--classes", "1", "--per-class", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_round_run_writes_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let out = dir.path().join("run");
    let o = otafl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 1);
    let summary: String = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"round_count\": 0"));
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 10);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&otafl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    }
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 11);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 6);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_otafl"))
            .args(["run", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env("OTAFL_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        outputs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&otafl(&["run", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()])), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, CONFIG.replace("ROUNDS", "5").replace("\"seed\": 3", "\"seed\": 3, \"bogus\": true")).unwrap();
    let o = otafl(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    assert_eq!(code(&otafl(&["run"])), 2);
    assert_eq!(code(&otafl(&["frobnicate"])), 2);
}

#[test]
fn compare_writes_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 10);
    let out = dir.path().join("cmp");
    let o = otafl(&["compare", "--config", &cfg, "--sparsities", "0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    // header plus {osp, imp} x {full, partial}
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("mode,target_sparsity,participation,fraction,"));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);
}
