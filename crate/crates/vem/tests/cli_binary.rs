//! Exit-code and flag behavior of the installed binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vem"))
}

#[test]
fn missing_problem_flag_exits_2() {
    let status = bin().args(["reference"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_problem_exits_2() {
    let status = bin()
        .args(["solve", "--problem", "does-not-exist"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn grid_too_small_exits_2_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("small");
    let status = bin()
        .args([
            "solve",
            "--problem",
            "example1",
            "--nodes",
            "2",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn reference_command_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "reference",
            "--problem",
            "example1",
            "--nodes",
            "41",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("reference_trajectory.csv").exists());
}

#[test]
fn check_command_passes_on_builtin() {
    let status = bin()
        .args([
            "check",
            "--problem",
            "example1",
            "--samples",
            "4",
            "--audit-nodes",
            "101",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn solve_short_budget_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "solve",
            "--problem",
            "example1",
            "--tau-end",
            "0.25",
            "--out-dir",
            dir.path().join("o").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
