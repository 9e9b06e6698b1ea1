#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn splat4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat4d"))
        .args(args)
        .output()
        .expect("spawn splat4d")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = splat4d(args);
    assert!(
        out.status.success(),
        "splat4d {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file below `root` as (relative path, bytes), sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

pub fn pngs(root: &Path) -> Vec<PathBuf> {
    tree(root)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect()
}

/// Synthesizes a preset scene and fits it briefly with a small cloud.
pub fn quick_fit(dir: &Path, preset: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let scene = dir.join("scene");
    run_ok(&["synth", "--preset", preset, "--out", s(&scene)]);
    let manifest = scene.join("scene.json");
    let out = dir.join("fit");
    let mut args = vec![
        "fit",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--static-steps",
        "10",
        "--dynamic-steps",
        "10",
        "--init-count",
        "200",
        "--sh-degree",
        "0",
        "--log-every",
        "0",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    (manifest, out)
}
