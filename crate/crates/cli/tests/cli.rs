// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env("PMSPLIT_DEVICE_SIZE", "64M")
        .output()
        .expect("spawn bench")
}

fn script(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scripts")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn run_prints_json_results() {
    let out = bench(&[
        "run", "--engine", "splitfs-strict", "--workload", "append", "--file-size", "1M", "--op-size", "4K",
        "--format", "json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let r = &v.as_array().unwrap()[0];
    assert_eq!(r["engine"], "splitfs-strict");
    assert_eq!(r["ops"], 256);
}

#[test]
fn compare_writes_csv_file() {
    let dir = std::env::temp_dir().join(format!("pmsplit-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cmp.csv");
    let out = bench(&[
        "compare", "--engine", "splitfs-posix", "dax-baseline", "--workload", "seq_write", "--file-size", "512K",
        "--out", path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(text.contains("dax-baseline"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn crashcheck_exit_codes() {
    let s = script("01_append_fsync.txt");
    let ok = bench(&["crashcheck", "--script", &s, "--mode", "strict"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["violation_count"], 0);

    let bad = bench(&[
        "crashcheck", "--script", &s, "--mode", "strict", "--policy", "adversarial", "--inject", "skip-log-fence",
    ]);
    assert_eq!(bad.status.code(), Some(1));

    let missing = bench(&["crashcheck", "--script", "/nonexistent", "--mode", "strict"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn unknown_engine_is_rejected() {
    let out = bench(&["run", "--engine", "ext4", "--workload", "append"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown engine"));
}
