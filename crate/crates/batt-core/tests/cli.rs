//! Drives the `batt` binary end to end: flags, formats, files, exit codes.

use std::process::{Command, Output};

use serde_json::Value;

fn batt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_batt"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = batt().args(args).output().expect("binary runs");
    assert!(
        output.status.success(),
        "batt {args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

const SMALL: &[&str] = &["--seq-len", "64", "--dim", "8", "--block-size", "8"];

#[test]
fn run_emits_valid_json_to_stdout() {
    let output = run_ok(&[&["run"], SMALL, &["--heads", "2"]].concat());
    let report: Value = serde_json::from_slice(&output.stdout).expect("stdout is JSON");
    assert_eq!(report["kind"], "run");
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["config"]["seq_len"], 64);
    assert_eq!(report["heads"].as_array().unwrap().len(), 2);
    assert_eq!(report["aggregate"]["bound_violations_total"], 0);
    assert_ne!(report["determinism_hash"], "");
}

#[test]
fn run_emits_csv_with_one_row_per_head() {
    let output = run_ok(&[&["run"], SMALL, &["--heads", "3", "--format", "csv"]].concat());
    let text = String::from_utf8(output.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per head");
    assert!(lines[0].starts_with("schema_version,kind,"));
    assert!(lines[0].ends_with(",determinism_hash,wall_clock_ms"));
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let output = run_ok(&[&["run"], SMALL, &["--out", path.to_str().unwrap()]].concat());
    assert!(output.stdout.is_empty());
    let report: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(report["kind"], "run");
}

#[test]
fn gen_writes_loadable_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            &["gen"],
            SMALL,
            &["--heads", "2", "--out", dir.path().to_str().unwrap()],
        ]
        .concat(),
    );
    for name in [
        "q0.batn", "k0.batn", "v0.batn", "q1.batn", "k1.batn", "v1.batn",
    ] {
        let len = std::fs::metadata(dir.path().join(name)).unwrap().len();
        assert_eq!(len, 24 + 64 * 8 * 4, "{name} holds header plus f32 payload");
    }

    let from_files = run_ok(
        &[
            &["run"],
            SMALL,
            &["--heads", "2", "--in", dir.path().to_str().unwrap()],
        ]
        .concat(),
    );
    let from_seed = run_ok(&[&["run"], SMALL, &["--heads", "2"]].concat());
    let a: Value = serde_json::from_slice(&from_files.stdout).unwrap();
    let b: Value = serde_json::from_slice(&from_seed.stdout).unwrap();
    assert_eq!(a["determinism_hash"], b["determinism_hash"]);
}

#[test]
fn mismatched_input_dims_fail_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[&["gen"], SMALL, &["--out", dir.path().to_str().unwrap()]].concat());
    let output = batt()
        .args([
            "run",
            "--seq-len",
            "32",
            "--dim",
            "8",
            "--block-size",
            "8",
            "--in",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("seq_len"), "stderr was: {stderr}");
}

#[test]
fn diag_is_json_only() {
    let output = run_ok(&[&["diag"], SMALL, &["--seeds", "2"]].concat());
    let report: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["kind"], "diag");
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(report["lemma"]["violations"], 0);

    let csv = batt()
        .args([&["diag"], SMALL, &["--format", "csv"]].concat())
        .output()
        .unwrap();
    assert_eq!(csv.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&csv.stderr).contains("format"));
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let output = run_ok(
        &[
            &["sweep"],
            SMALL,
            &[
                "--densities",
                "0.25,0.75",
                "--sorts",
                "none,qk",
                "--comps",
                "diag",
                "--format",
                "csv",
            ],
        ]
        .concat(),
    );
    let text = String::from_utf8(output.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "header plus four cells");
    assert_eq!(
        lines[0],
        "density,sort,comp,captured_mass,output_max_abs_err,pairs_computed,density_achieved,bound_violations,error"
    );
    assert!(lines[1].starts_with("2.50000000e-1,none,diag,"));
    assert!(lines[4].starts_with("7.50000000e-1,qk,diag,"));
}

#[test]
fn bad_flag_values_exit_with_usage_error() {
    let output = batt()
        .args([&["run"], SMALL, &["--sort", "sideways"]].concat())
        .output()
        .unwrap();
    assert_ne!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stderr).contains("sort"));

    let output = batt()
        .args([&["run"], SMALL, &["--density", "0"]].concat())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("density"));
}

#[test]
fn thread_cap_is_honored_and_validated() {
    let output = batt()
        .args([&["run"], SMALL].concat())
        .env("BATT_THREADS", "1")
        .output()
        .unwrap();
    assert!(output.status.success());

    let output = batt()
        .args([&["run"], SMALL].concat())
        .env("BATT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("BATT_THREADS"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let single = batt()
        .args([&["run"], SMALL, &["--heads", "3"]].concat())
        .env("BATT_THREADS", "1")
        .output()
        .unwrap();
    let many = batt()
        .args([&["run"], SMALL, &["--heads", "3"]].concat())
        .env("BATT_THREADS", "4")
        .output()
        .unwrap();
    let a: Value = serde_json::from_slice(&single.stdout).unwrap();
    let b: Value = serde_json::from_slice(&many.stdout).unwrap();
    assert_eq!(a["determinism_hash"], b["determinism_hash"]);
}

#[test]
fn gen_requires_a_writable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let output = batt()
        .args([&["gen"], SMALL, &["--out", file.to_str().unwrap()]].concat())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}
