use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nvcce::analysis::fit_t1_samples;
use nvcce::dynamics::SurvivalCurve;
use nvcce::lattice::load_bath;

fn nvcce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvcce"))
        .args(args)
        .env_remove("NVCCE_THREADS")
        .env_remove("NVCCE_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn generate_bath_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let out = nvcce(&["generate-bath", "--seed", "1", "--abundance", "0.011", "--max-spins", "50", "--out", path_arg(p)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("50 spins"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_bath(&a).unwrap().len(), 50);
}

#[test]
fn empty_bath_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&["generate-bath", "--abundance", "0", "--out-dir", path_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty bath"));
}

#[test]
fn usage_errors() {
    assert_eq!(nvcce(&["run", "--order", "0"]).status.code(), Some(2));
    assert_eq!(nvcce(&["sweep", "--from", "1024.95", "--to", "1025.05", "--steps", "0"]).status.code(), Some(2));
    assert_eq!(nvcce(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(nvcce(&["--threads", "0", "show-constants"]).status.code(), Some(2));
    let out = nvcce(&["run", "--bath", "/nonexistent/bath.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exact_mode_respects_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&["run", "--max-spins", "13", "--mode", "exact", "--out-dir", path_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cap 12"));
}

#[test]
fn both_modes_agree_on_small_bath() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&[
        "run", "--seed", "3", "--max-spins", "4", "--order", "4", "--mode", "both", "--bz", "1024.97",
        "--out-dir", path_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cce = SurvivalCurve::read_values(&dir.path().join("curve_bz1024.97_M4.csv")).unwrap();
    let exact = SurvivalCurve::read_values(&dir.path().join("curve_bz1024.97_exact.csv")).unwrap();
    assert_eq!(cce.len(), 1001);
    let d = cce.iter().zip(&exact).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max);
    assert!(d < 1e-10, "{d}");
    let text = std::fs::read_to_string(dir.path().join("curve_bz1024.97_exact.csv")).unwrap();
    assert!(text.contains("# method = exact"));
}

#[test]
fn resolved_config_reproduces_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = nvcce(&[
        "run", "--seed", "5", "--max-spins", "5", "--order", "2", "--bz", "1024.99,1025.01", "--points", "201",
        "--out-dir", path_arg(&first),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = first.join("resolved_config.toml");
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("bz_gauss") && text.contains("t_end_us"));

    let second = dir.path().join("second");
    let out = nvcce(&["run", "--config", path_arg(&cfg), "--out-dir", path_arg(&second)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (a, b) = (csv_files(&first), csv_files(&second));
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn single_point_sweep_matches_run_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "9", "--max-spins", "4", "--order", "3"];
    let run_dir = dir.path().join("run");
    let mut args = vec!["run"];
    args.extend(common);
    args.extend(["--bz", "1025.01", "--out-dir", path_arg(&run_dir)]);
    assert!(nvcce(&args).status.success());
    let sweep_dir = dir.path().join("sweep");
    let mut args = vec!["sweep"];
    args.extend(common);
    args.extend(["--fields", "1025.01", "--out-dir", path_arg(&sweep_dir)]);
    let out = nvcce(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = SurvivalCurve::read_values(&run_dir.join("curve_bz1025.01_M3.csv")).unwrap();
    let (t, p): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let fit = fit_t1_samples(&t, &p).unwrap();
    let table = std::fs::read_to_string(sweep_dir.join("sweep_M3.csv")).unwrap();
    let row: Vec<&str> = table.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "1025.01");
    assert_eq!(row[2].parse::<f64>().unwrap(), fit.inv_t1());
    assert_eq!(row[3].parse::<f64>().unwrap(), fit.baseline);
}

#[test]
fn sweep_range_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&[
        "sweep", "--seed", "2", "--max-spins", "3", "--order", "2", "--from", "1024.95", "--to", "1025.05",
        "--steps", "5", "--points", "101", "--out-dir", path_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep_M2.csv")).unwrap();
    let fields: Vec<f64> = table.lines().skip(2).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(fields.len(), 5);
    assert_eq!(fields[0], 1024.95);
    assert_eq!(fields[4], 1025.05);
}

#[test]
fn convergence_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&[
        "convergence", "--seed", "4", "--max-spins", "6", "--orders", "3", "--points", "101",
        "--out-dir", path_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let out = nvcce(&[
        "convergence", "--seed", "4", "--max-spins", "6", "--orders", "1,2,3", "--sizes", "2,4,6",
        "--points", "101", "--bz", "1030", "--out-dir", path_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("order,")).count(), 2);
    assert_eq!(table.lines().filter(|l| l.starts_with("size,")).count(), 2);
    assert!(dir.path().join("curve_bz1030_M3.csv").exists());
}

#[test]
fn cache_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let run = |out: &str| {
        Command::new(env!("CARGO_BIN_EXE_nvcce"))
            .args(["run", "--seed", "6", "--max-spins", "4", "--order", "2", "--points", "51"])
            .args(["--out-dir", path_arg(&dir.path().join(out))])
            .env("NVCCE_CACHE_DIR", &cache)
            .env("NVCCE_THREADS", "1")
            .output()
            .unwrap()
    };
    assert!(run("a").status.success());
    assert!(std::fs::read_dir(&cache).unwrap().count() >= 1);
    assert!(run("b").status.success());
    let a = csv_files(&dir.path().join("a"));
    let b = csv_files(&dir.path().join("b"));
    assert_eq!(std::fs::read(&a[0]).unwrap(), std::fs::read(&b[0]).unwrap());
}

#[test]
fn show_constants_and_validate() {
    let out = nvcce(&["show-constants"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("resonance field: 1024.97954"), "{text}");

    let out = nvcce(&["validate", "--t-end-us", "5", "--points", "101"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert_eq!(text.lines().count(), 9);
}
