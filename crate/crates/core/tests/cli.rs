//! End-to-end runs of the `stackelberg-mv` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_stackelberg-mv");

fn config(experiment: &str, simulation: &str, verify: &str) -> String {
    format!(
        r#"experiment = "{experiment}"
output_dir = "unused"

[model]
mu1 = 0.10
mu2 = 0.02
sigma = 0.2
r = 0.03
T = 1.0
gamma1 = 2.0
gamma2 = 2.0
lambda1 = 0.5
lambda2 = 0.5
lambda0 = 0.1

[pde]
n_time = 64
n_space = 48
scheme = "crank_nicolson"

[simulation]
x1_0 = 1.0
x2_0 = 1.0
seed = 11
{simulation}

[verify]
{verify}
"#
    )
}

/// Writes `text` as a config in `dir` and runs the binary on it.
fn run(dir: &TempDir, name: &str, text: &str, extra: &[&str]) -> (i32, PathBuf) {
    let cfg = dir.path().join(format!("{name}.toml"));
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join(name);
    let status = Command::new(BIN)
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "2"])
        .args(extra)
        .status()
        .unwrap();
    (status.code().unwrap(), out)
}

fn manifest(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key=value line");
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn lookup<'a>(m: &'a [(String, String)], key: &str) -> &'a str {
    &m.iter().find(|(k, _)| k == key).unwrap().1
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn solve_surfaces_writes_four_surfaces_and_manifest() {
    let dir = TempDir::new().unwrap();
    let (code, out) = run(&dir, "solve", &config("solve_surfaces", "p0 = 0.5\nn_paths = 10", ""), &[]);
    assert_eq!(code, 0);
    let csvs = csv_files(&out);
    for s in ["a1", "a2", "A1", "A2"] {
        assert!(csvs.contains(&format!("{s}_64x48.csv")), "{csvs:?}");
    }
    let m = manifest(&out);
    let keys: Vec<&str> = m.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(
        keys,
        ["tool_version", "experiment", "seed", "config", "config_sha256", "threads", "status", "timestamp"]
    );
    assert_eq!(lookup(&m, "status"), "pass");
    assert_eq!(lookup(&m, "threads"), "2");
    assert!(out.join(lookup(&m, "config")).exists());
}

#[test]
fn simulate_is_reproducible_from_config() {
    let dir = TempDir::new().unwrap();
    let text = config("simulate", "p0 = 0.5\nn_paths = 400\nintervals = 16\nsubsteps = 2", "");
    let (c1, out) = run(&dir, "sim", &text, &["--dump-paths"]);
    let a = dir.path().join("first");
    fs::rename(&out, &a).unwrap();
    let (c2, b) = run(&dir, "sim", &text, &["--dump-paths"]);
    assert_ne!(c1, 1);
    assert_eq!(c1, c2);
    let names = csv_files(&a);
    assert_eq!(names, csv_files(&b));
    assert!(names.contains(&"estimates.csv".to_string()));
    assert!(names.contains(&"path_sampled_000.csv".to_string()));
    assert!(names.contains(&"path_exploratory_009.csv".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    for ((ka, va), (kb, vb)) in ma.iter().zip(&mb) {
        assert_eq!(ka, kb);
        if ka != "timestamp" {
            assert_eq!(va, vb, "{ka}");
        }
    }

    // Rerunning from the written config alone gives the same artifacts.
    let saved = fs::read_to_string(a.join("config.toml")).unwrap();
    let (_, c) = run(&dir, "replay", &saved, &["--dump-paths"]);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(c.join(n)).unwrap(), "{n}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let text = config("simulate", "p0 = 0.5\nn_paths = 200\nintervals = 8\nsubsteps = 1\nregime = \"sampled\"", "");
    let (_, a) = run(&dir, "base", &text, &[]);
    let (_, b) = run(&dir, "reseeded", &text, &["--seed", "99"]);
    assert_eq!(lookup(&manifest(&a), "seed"), "11");
    assert_eq!(lookup(&manifest(&b), "seed"), "99");
    assert_ne!(
        fs::read(a.join("estimates.csv")).unwrap(),
        fs::read(b.join("estimates.csv")).unwrap()
    );
    assert!(!a.join("path_sampled_000.csv").exists());
}

#[test]
fn reduce_checks_pass() {
    let dir = TempDir::new().unwrap();
    let (code, out) = run(
        &dir,
        "checks",
        &config("reduce_checks", "p0 = 0.5\nn_paths = 2000\nintervals = 16\nsubsteps = 2", "check_samples = 500"),
        &[],
    );
    assert_eq!(code, 0);
    let checks = fs::read_to_string(out.join("checks.csv")).unwrap();
    assert!(checks.lines().skip(1).all(|l| l.ends_with(",true")), "{checks}");
}

#[test]
fn underpowered_convergence_reports_claim_failure() {
    let dir = TempDir::new().unwrap();
    let (code, out) = run(
        &dir,
        "conv",
        &config("convergence", "p0 = 0.5\nn_paths = 50", "meshes = [8, 16, 32, 64]\nfine_steps = 256"),
        &[],
    );
    assert_eq!(code, 2);
    assert_eq!(lookup(&manifest(&out), "status"), "fail");
    assert!(out.join("convergence.csv").exists());
}

#[test]
fn invalid_config_exits_with_error() {
    let dir = TempDir::new().unwrap();
    let (code, _) = run(&dir, "bad", &config("solve_surfaces", "p0 = 1.5\nn_paths = 10", ""), &[]);
    assert_eq!(code, 1);
    let (code, _) = run(&dir, "typo", &config("solve_surfaces", "p0 = 0.5\nn_paths = 10\nn_pahts = 3", ""), &[]);
    assert_eq!(code, 1);
    let status = Command::new(BIN).args(["--config", "/nonexistent.toml"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}
