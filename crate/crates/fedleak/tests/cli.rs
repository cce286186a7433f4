//! End-to-end CLI checks: exit codes and artifact emission.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedleak"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fedleak_cli_tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn missing_config_file_exits_one() {
    let out = bin()
        .args(["threshold-sweep", "--config", "/definitely/not/there.ini"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_grid_exits_one() {
    let dir = tmp("badgrid");
    let cfg = dir.join("bad.ini");
    std::fs::write(&cfg, "[grid]\nmask = 1.7\n").unwrap();
    let out = bin()
        .args(["threshold-sweep", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask ratio"));
}

#[test]
fn attack_demo_writes_artifacts_and_exits_zero() {
    let dir = tmp("demo");
    let cfg = dir.join("demo.ini");
    std::fs::write(
        &cfg,
        "[experiment]\nseeds = 1\n\
         [dataset]\nkinds = synth\ntrain = 40\ntest = 10\nclasses = 2\nheight = 12\nwidth = 12\n\
         [model]\narch = dense\n\
         [attack]\nmax_iterations = 60\n\
         [grid]\nnone =\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["attack-demo", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("original.pgm").exists());
    assert!(out_dir.join("reconstruction_raw.pgm").exists());
    assert!(out_dir.join("reconstruction_adjusted.pgm").exists());
    assert!(out_dir.join("leakage_report.txt").exists());
}

#[test]
fn failing_cells_exit_two() {
    let dir = tmp("partial");
    let cfg = dir.join("partial.ini");
    // 8x8 images are smaller than the 11x11 ssim window: every cell fails
    // after the attack, which is recorded per row while the run continues
    std::fs::write(
        &cfg,
        "[experiment]\nseeds = 1\n\
         [dataset]\nkinds = synth\ntrain = 20\ntest = 10\nclasses = 2\nheight = 8\nwidth = 8\n\
         [model]\narch = dense\n\
         [attack]\nmax_iterations = 30\n\
         [grid]\nnone =\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["threshold-sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("threshold.csv")).unwrap();
    assert!(csv.contains("error:"), "{csv}");
}
