#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

pub struct Run {
    pub code: i32,
    pub report: HashMap<String, String>,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn get(&self, k: &str) -> &str {
        self.report.get(k).map(String::as_str).unwrap_or_else(|| panic!("no `{k}` in report:\n{}", self.stdout))
    }

    pub fn num(&self, k: &str) -> f64 {
        self.get(k).parse().unwrap()
    }
}

/// Runs the CLI in `dir` with a clean seed environment.
pub fn geosep(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_geosep"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEOSEP_SEED")
        .env_remove("GEOSEP_MEM_ITEMS")
        .env_remove("GEOSEP_BLOCK_ITEMS")
        .output()
        .expect("spawn geosep");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let report = stdout
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Run {
        code: out.status.code().unwrap_or(-1),
        report,
        stdout,
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = geosep(dir, args);
    assert_eq!(r.code, 0, "geosep {args:?} failed:\n{}{}", r.stdout, r.stderr);
    r
}

/// Path -> bytes for every file under `root`, skipping scratch directories.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let e = e.unwrap();
            let p = e.path();
            let name = e.file_name().to_string_lossy().into_owned();
            if name.starts_with(".geosep-") {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// The full pipeline under one directory; returns per-command reports.
pub fn pipeline(dir: &Path, seed: &str) -> Vec<Run> {
    let g = ["--seed", seed, "--mem-items", "4096", "--block-items", "64"];
    let cmd = |args: &[&str]| {
        let mut v: Vec<&str> = args.to_vec();
        v.extend_from_slice(&g);
        ok(dir, &v)
    };
    vec![
        cmd(&["gen-packing", "--n", "3000", "--out", "pkg.bin"]),
        cmd(&["gen-tin", "--n", "3000", "--mode", "delaunay", "--out", "raw.bin"]),
        cmd(&["gen-tin", "--n", "2000", "--mode", "grid-jitter", "--out", "grid.bin"]),
        cmd(&["flowdirs", "--in", "raw.bin", "--out", "tin.bin"]),
        cmd(&["divide", "--in", "pkg.bin", "--r", "16", "--out-manifest", "pdiv"]),
        cmd(&["divide", "--in", "pkg.bin", "--r", "16", "--strict", "--out-manifest", "sdiv"]),
        cmd(&["divide", "--in", "tin.bin", "--r", "16", "--out-manifest", "tdiv"]),
        cmd(&["divide", "--in", "tin.bin", "--r", "16", "--classifier", "circumcircles", "--out-manifest", "cdiv"]),
        cmd(&["flow-sweep", "--in", "tin.bin", "--out", "sweep.acc"]),
        cmd(&["flow-div", "--in", "tin.bin", "--manifest", "tdiv", "--out", "div.acc"]),
        cmd(&["validate", "--in", "pkg.bin", "--manifest", "pdiv", "--bruteforce", "--r", "16"]),
        cmd(&["sep-stats", "--in", "pkg.bin", "--samples", "30", "--out-hist", "hist.txt"]),
        cmd(&["acc-compare", "--a", "sweep.acc", "--b", "div.acc"]),
    ]
}
