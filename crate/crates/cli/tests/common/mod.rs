#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_splatbev");

/// Small scenes and short budgets so every command finishes in seconds.
pub const TINY_CONFIG: &str = "\
train_scenes = 1
heldout_scenes = 1
sweep_heights = [0.0, 3.0]

[scene]
vehicles = 3
pedestrians = 3
lanes = 2
clutter_count = 4

[scene.rig]
cameras = 2
width = 56
height = 32

[fit]
iterations = 3

[train]
stage2_iters = 4
stage3_iters = 2
crop = 32
hidden = 8
";

pub fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("SPLATBEV_LOG", "warn").output().expect("spawn splatbev")
}

pub fn run_ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

pub fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Numeric cells of a CSV, in order; non-numeric cells are compared as text.
pub fn csv_cells(bytes: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(bytes).lines().flat_map(|l| l.split(',').map(str::to_owned).collect::<Vec<_>>()).collect()
}

/// Largest absolute difference between numeric cells; panics if the
/// non-numeric structure differs.
pub fn csv_max_drift(a: &[u8], b: &[u8]) -> f64 {
    let (ca, cb) = (csv_cells(a), csv_cells(b));
    assert_eq!(ca.len(), cb.len(), "csv shapes differ");
    let mut worst = 0.0f64;
    for (x, y) in ca.iter().zip(&cb) {
        match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(p), Ok(q)) => worst = worst.max((p - q).abs()),
            _ => assert_eq!(x, y),
        }
    }
    worst
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
