use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn muse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse")).args(args).output().expect("spawn muse")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn selftest_passes_in_both_precisions() {
    for dtype in ["f64", "f32"] {
        let o = muse(&["selftest", "--dtype", dtype]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = String::from_utf8(o.stdout).unwrap();
        assert_eq!(out.lines().count(), 6);
        assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
    }
}

#[test]
fn error_sweep_grid_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = muse(&[
        "error-sweep", "--clusters", "16,32,64", "--iters", "1", "--cap-ratio", "1.5", "--n", "1024", "--d", "16",
        "--seeds", "5", "--workload", "mixture", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out);
    assert_eq!(report["rows"].as_array().unwrap().len(), 15);
    let means: Vec<f64> = report["aggregates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["mean_rel_sq_error"].as_f64().unwrap())
        .collect();
    assert_eq!(means.len(), 3);
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn report_bytes_are_reproducible_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let o = muse(&[
            "error-sweep", "--n", "256", "--clusters", "8,16", "--seeds", "2", "--seed", "7", "--no-timing", "--out",
            path.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn causal_bench_degenerate_plan() {
    let o = muse(&["causal-bench", "--n", "2048", "--block", "2048", "--clusters", "32", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("exact path (no MuSe blocks)"));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n == "exact path (no MuSe blocks)"));
}

#[test]
fn bench_rows_per_length_and_implementation() {
    let o = muse(&[
        "bench", "--workload", "isotropic", "--n", "256,512", "--budget", "2048", "--reps", "1", "--clusters", "16",
        "--format", "csv", "--dtype", "f32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.trim_end().lines().count(), 1 + 4, "{csv}");
}

#[test]
fn ablate_exit_status_follows_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate.json");
    let o = muse(&["ablate", "--n", "512", "--spread", "0.15", "--seeds", "2", "--out", out.to_str().unwrap()]);
    let report = read_json(&out);
    let verdicts = report["verdicts"].as_array().unwrap();
    assert_eq!(verdicts.len(), 2);
    assert_eq!(report["rows"].as_array().unwrap().len(), 8);
    let ordered = verdicts.iter().all(|v| v["ordered"].as_bool().unwrap());
    assert_eq!(o.status.success(), ordered, "{}", stderr(&o));
}

#[test]
fn generated_file_feeds_the_file_workload() {
    let dir = tempfile::tempdir().unwrap();
    let qkv = dir.path().join("w.qkv");
    let path = qkv.to_str().unwrap();
    let o = muse(&["gen-qkv", "--n", "128", "--d", "8", "--heads", "2", "--dtype", "f32", "--out", path]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::metadata(&qkv).unwrap().len(), 32 + 3 * 2 * 128 * 8 * 4);

    let o = muse(&["error-sweep", "--workload", "file", "--path", path, "--clusters", "8", "--seeds", "1", "--dtype", "f32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rows"][0]["n"], 128);

    // stored as f32, widened to f64
    let o = muse(&["error-sweep", "--workload", "file", "--path", path, "--clusters", "8", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(&qkv, b"MUSEQKV1").unwrap();
    let o = muse(&["error-sweep", "--workload", "file", "--path", path, "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: error-sweep failed"), "{}", stderr(&o));
}

#[test]
fn io_errors_exit_nonzero() {
    let o = muse(&["error-sweep", "--workload", "file", "--path", "/nonexistent/w.qkv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/w.qkv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_name_the_flag() {
    let cases: &[(&[&str], &str)] = &[
        (&["selftest", "--block", "64"], "--block does not apply to selftest"),
        (&["error-sweep", "--path", "x.qkv"], "--path needs --workload file"),
        (&["error-sweep", "--workload", "file"], "--workload file needs --path"),
        (&["error-sweep", "--workload", "file", "--path", "x", "--n", "64"], "--n conflicts with --workload file"),
        (&["error-sweep", "--workload", "isotropic", "--c-true", "4"], "--c-true only applies to --workload mixture"),
        (&["ablate", "--clusters", "16,64"], "--clusters takes a single value for ablate"),
        (&["ablate", "--ablation", "no_dipole"], "--ablation does not apply to ablate"),
        (&["causal-bench", "--n", "512,1024"], "--n takes a single value for causal-bench"),
        (&["bench", "--workload", "file", "--path", "x"], "--path does not apply to bench"),
        (&["gen-qkv"], "gen-qkv needs --out"),
        (&["error-sweep", "--threads", "0"], "--threads must be at least 1"),
    ];
    for (args, message) in cases {
        let o = muse(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains(message), "{args:?}: {}", stderr(&o));
    }
    let o = muse(&["error-sweep", "--dtype", "f16"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dtype"));
}

#[test]
fn invalid_values_fail_before_running() {
    let o = muse(&["error-sweep", "--clusters", "0", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = muse(&["causal-bench", "--n", "1000", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let o = muse(&["error-sweep", "--help"]);
    let help = String::from_utf8(o.stdout).unwrap();
    for (flag, default) in [
        ("--workload", "[default: mixture]"),
        ("--path", ""),
        ("--batch", "[default: 1]"),
        ("--heads", "[default: 1]"),
        ("--n", "[default: 1024]"),
        ("--d", "[default: 16]"),
        ("--c-true", "[default: 16]"),
        ("--spread", "[default: 0.1]"),
        ("--clusters", "[default: 64]"),
        ("--iters", "[default: 1]"),
        ("--cap-ratio", "[default: 1.5]"),
        ("--scale", "[default: 1/sqrt(d)]"),
        ("--ablation", "[default: full]"),
        ("--block", "[default: 256]"),
        ("--seeds", "[default: 5]"),
        ("--seed", "[default: 0]"),
        ("--dtype", "[default: f64]"),
        ("--threads", "[default: all cores]"),
        ("--out", "[default: stdout]"),
        ("--format", "[default: json]"),
    ] {
        let line = help
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{flag} ")))
            .unwrap_or_else(|| panic!("{flag} missing from help"));
        assert!(line.contains(default), "{line}");
    }
}
