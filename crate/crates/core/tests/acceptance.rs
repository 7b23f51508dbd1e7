//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the verdicts stream to stdout while the slower
//! criteria are still computing. Set `NVCCE_EXTENDED=1` to add the N = 50
//! convergence run, which is reported but never gates the result.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nvcce::analysis::{field_sweep, nearest_resonance, oscillation_amplitude};
use nvcce::cce::{cce_survival, convergence_scan, CceSettings};
use nvcce::cli::checks::{
    contract_outcomes, denominator_unity, numerical_contracts, oracle_equivalence, small_bath, ContractStats,
};
use nvcce::dynamics::TimeGrid;
use nvcce::hamiltonian::PhysicalConstants;
use nvcce::lattice::{sample_bath, LatticeConfig, SpinBath};

const EQUIVALENCE_FIELDS: [f64; 2] = [1024.97, 1025.01];
const DETUNING_FIELDS: [f64; 3] = [1024.97, 1024.99, 1025.01];
const NEAR_RESONANCE_GAUSS: f64 = 1024.975;
const DESK_BATH_SEED: u64 = 1;
const DESK_BATH_SIZE: usize = 25;

struct Report {
    failures: usize,
}

impl Report {
    fn verdict(&mut self, id: usize, name: &str, passed: bool, detail: &str) {
        if !passed {
            self.failures += 1;
        }
        println!("{} criterion {id} ({name}): {detail}", if passed { "PASS" } else { "FAIL" });
        let _ = std::io::stdout().flush();
    }

    fn error(&mut self, id: usize, name: &str, e: &dyn std::fmt::Display) {
        self.verdict(id, name, false, &format!("error: {e}"));
    }
}

fn desk_bath(size: usize) -> SpinBath {
    sample_bath(&LatticeConfig {
        seed: DESK_BATH_SEED,
        max_spins: Some(size),
        ..LatticeConfig::default()
    })
    .expect("default lattice samples")
}

fn criteria_1_2(r: &mut Report) {
    let start = Instant::now();
    let grid = TimeGrid::default();
    let baths: Vec<SpinBath> = (2..=6usize)
        .flat_map(|n| (0..4u64).map(move |s| small_bath(1000 + 10 * n as u64 + s, n)))
        .collect::<Result<_, _>>()
        .expect("small baths");
    match oracle_equivalence(&baths, &EQUIVALENCE_FIELDS, &grid) {
        Ok(stats) => {
            let secs = start.elapsed().as_secs_f64();
            r.verdict(
                1,
                "oracle equivalence",
                stats.max_oracle_error < 1e-10 && secs < 300.0 && baths.len() >= 20,
                &format!(
                    "{} baths x {} fields, max |P_cce - P_exact| = {:.3e} (< 1e-10), {secs:.1} s (< 300 s)",
                    baths.len(),
                    EQUIVALENCE_FIELDS.len(),
                    stats.max_oracle_error
                ),
            );
            r.verdict(
                2,
                "reconstruction identity",
                stats.max_reconstruction_error < 1e-12,
                &format!(
                    "{} clusters, max |P_c - prod P~| = {:.3e} (< 1e-12)",
                    stats.clusters, stats.max_reconstruction_error
                ),
            );
        }
        Err(e) => {
            r.error(1, "oracle equivalence", &e);
            r.error(2, "reconstruction identity", &e);
        }
    }
}

fn criterion_3(r: &mut Report) {
    let fields: Vec<f64> = vec![0.0, 500.0, 1000.0, 1024.2, 1024.95, 1024.975, 1025.0, 1025.05, 1100.0, 3000.0];
    match denominator_unity(&fields, &TimeGrid::default()) {
        Ok(d) => r.verdict(
            3,
            "denominator unity",
            d < 1e-12,
            &format!("{} fields x 1001 points, max deviation {d:.3e} (< 1e-12)", fields.len()),
        ),
        Err(e) => r.error(3, "denominator unity", &e),
    }
}

fn criterion_4(r: &mut Report, bath: &SpinBath) {
    let start = Instant::now();
    let grid = TimeGrid::default();
    let settings = CceSettings::new(NEAR_RESONANCE_GAUSS, grid);
    match convergence_scan(bath, &[2, 3, 4, 5], &settings) {
        Ok(rep) => {
            let secs = start.elapsed().as_secs_f64();
            let d23 = rep.diff(2, 3).unwrap_or(f64::NAN);
            let d45 = rep.diff(4, 5).unwrap_or(f64::NAN);
            r.verdict(
                4,
                "order convergence",
                d45 < 1e-2 && d45 < 0.2 * d23 && secs < 1800.0,
                &format!(
                    "N = {}, Bz = {NEAR_RESONANCE_GAUSS} G: max|P4 - P5| = {d45:.3e} (< 1e-2), max|P2 - P3| = {d23:.3e} (ratio {:.3e} < 0.2), {secs:.1} s (< 1800 s)",
                    bath.len(),
                    d45 / d23
                ),
            );
        }
        Err(e) => r.error(4, "order convergence", &e),
    }
    if std::env::var("NVCCE_EXTENDED").is_ok_and(|v| v == "1") {
        let big = desk_bath(50);
        let start = Instant::now();
        match convergence_scan(&big, &[2, 3, 4, 5], &settings) {
            Ok(rep) => println!(
                "INFO extended N = {}: max|P4 - P5| = {:.3e}, max|P2 - P3| = {:.3e}, {:.1} s (non-gating)",
                big.len(),
                rep.diff(4, 5).unwrap_or(f64::NAN),
                rep.diff(2, 3).unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            ),
            Err(e) => println!("INFO extended N = 50 run failed: {e} (non-gating)"),
        }
    }
}

fn criterion_5(r: &mut Report, bath: &SpinBath) {
    let grid = TimeGrid::default();
    let mut amps = Vec::new();
    let mut curves = Vec::new();
    for bz in DETUNING_FIELDS {
        match cce_survival(bath, 4, &CceSettings::new(bz, grid)) {
            Ok(c) => {
                amps.push(oscillation_amplitude(&c));
                curves.push(c);
            }
            Err(e) => return r.error(5, "detuning phenomenology", &e),
        }
    }
    let root = match nearest_resonance(&PhysicalConstants::default(), NEAR_RESONANCE_GAUSS) {
        Ok(x) => x,
        Err(e) => return r.error(5, "detuning phenomenology", &e),
    };
    let nearest = (0..DETUNING_FIELDS.len())
        .min_by(|&a, &b| (DETUNING_FIELDS[a] - root).abs().total_cmp(&(DETUNING_FIELDS[b] - root).abs()))
        .expect("fields");
    let values = &curves[nearest].values;
    let first_low = values.iter().position(|&p| p < 0.2);
    let recovery = first_low.map(|j| values[j..].iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let ordered = amps[0] > amps[1] && amps[1] > amps[2];
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let decays = first_low.is_some() && recovery.is_some_and(|m| m <= 0.5);
    r.verdict(
        5,
        "detuning phenomenology",
        ordered && decays,
        &format!(
            "M = 4, peak-to-trough {:.4e} @ {} G, {:.4e} @ {} G, {:.4e} @ {} G (strictly decreasing: {ordered}); at {} G P spans [{lo:.4e}, {hi:.4e}], first P < 0.2 at {} with max afterwards {} (<= 0.5)",
            amps[0],
            DETUNING_FIELDS[0],
            amps[1],
            DETUNING_FIELDS[1],
            amps[2],
            DETUNING_FIELDS[2],
            DETUNING_FIELDS[nearest],
            first_low.map_or("never".to_string(), |j| format!("{:.2} us", grid.t(j))),
            recovery.map_or("n/a".to_string(), |m| format!("{m:.4e}")),
        ),
    );
}

fn criterion_6(r: &mut Report, bath: &SpinBath) {
    let grid = TimeGrid::default();
    let fields: Vec<f64> = (0..=20).map(|i| 1024.95 + 0.005 * i as f64).collect();
    let root = match nearest_resonance(&PhysicalConstants::default(), NEAR_RESONANCE_GAUSS) {
        Ok(x) => x,
        Err(e) => return r.error(6, "resonance enhancement", &e),
    };
    let rows = match field_sweep(bath, 4, &fields, &grid, &CceSettings::new(fields[0], grid)) {
        Ok(rows) => rows,
        Err(e) => return r.error(6, "resonance enhancement", &e),
    };
    let rate = |i: usize| rows[i].fit.as_ref().ok().filter(|f| f.converged).map(|f| f.inv_t1());
    let peak = (0..rows.len())
        .filter_map(|i| rate(i).map(|v| (i, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    let edges = [rate(0), rate(rows.len() - 1)];
    let unconverged = rows.iter().filter(|r| !r.fit.as_ref().is_ok_and(|f| f.converged)).count();
    let (passed, detail) = match (peak, edges) {
        (Some((i, p)), [Some(lo), Some(hi)]) => {
            let edge = lo.max(hi);
            let ratio = if edge > 0.0 { p / edge } else { f64::INFINITY };
            let offset = (rows[i].bz_gauss - root).abs();
            (
                ratio >= 5.0 && offset <= 0.02,
                format!(
                    "peak 1/T1 = {p:.4e} /us at {} G ({offset:.4} G from root {root:.4} G, <= 0.02), edges {lo:.4e} and {hi:.4e} /us, ratio {ratio:.3e} (>= 5), {unconverged} of {} fits unconverged",
                    rows[i].bz_gauss,
                    rows.len()
                ),
            )
        }
        _ => (
            false,
            format!(
                "no converged fit at the peak or at a sweep edge ({unconverged} of {} fits unconverged)",
                rows.len()
            ),
        ),
    };
    r.verdict(6, "resonance enhancement", passed, &detail);
}

fn criterion_7(r: &mut Report) {
    let times = [0.37, 4.1, 9.9, 13.3, 20.0];
    let mut stats = ContractStats::default();
    for (i, (seed, n)) in [(11u64, 2usize), (12, 3), (13, 4), (14, 4)].iter().enumerate() {
        let bath = match small_bath(*seed, *n) {
            Ok(b) => b,
            Err(e) => return r.error(7, "numerical contracts", &e),
        };
        match numerical_contracts(&bath, EQUIVALENCE_FIELDS[i % 2], *n, &times) {
            Ok(s) => {
                stats.hermiticity = stats.hermiticity.max(s.hermiticity);
                stats.unitarity = stats.unitarity.max(s.unitarity);
                stats.trace = stats.trace.max(s.trace);
                stats.imaginary = stats.imaginary.max(s.imaginary);
                stats.time_reversal = stats.time_reversal.max(s.time_reversal);
                stats.decoupled = stats.decoupled.max(s.decoupled);
            }
            Err(e) => return r.error(7, "numerical contracts", &e),
        }
    }
    let outcomes = contract_outcomes(&stats);
    let detail = outcomes
        .iter()
        .map(|o| format!("{} {}", o.name, if o.passed { "ok" } else { "violated" }))
        .collect::<Vec<_>>()
        .join(", ");
    for o in &outcomes {
        println!("    {}", o.line());
    }
    r.verdict(7, "numerical contracts", outcomes.iter().all(|o| o.passed), &detail);
}

fn run_once(dir: &Path, threads: usize) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let out = Command::new(env!("CARGO_BIN_EXE_nvcce"))
        .args(["--threads", &threads.to_string(), "run", "--seed", "7", "--max-spins", "8", "--order", "3"])
        .args(["--bz", "1024.97,1025.01", "--deterministic", "true", "--out-dir"])
        .arg(dir)
        .env_remove("NVCCE_CACHE_DIR")
        .env_remove("NVCCE_THREADS")
        .output()?;
    if !out.status.success() {
        return Err(std::io::Error::other(format!(
            "nvcce run exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p)?));
        }
    }
    files.sort();
    Ok(files)
}

fn criterion_8(r: &mut Report) {
    let outcome = (|| -> std::io::Result<(bool, String)> {
        let root = tempfile::tempdir()?;
        let runs = [
            run_once(&root.path().join("a"), 1)?,
            run_once(&root.path().join("b"), 1)?,
            run_once(&root.path().join("c"), 2)?,
        ];
        let same = !runs[0].is_empty() && runs.iter().all(|r| *r == runs[0]);
        Ok((
            same,
            format!(
                "{} CSVs per run, runs with 1, 1 and 2 threads byte-identical: {same}",
                runs[0].len()
            ),
        ))
    })();
    match outcome {
        Ok((passed, detail)) => r.verdict(8, "determinism", passed, &detail),
        Err(e) => r.error(8, "determinism", &e),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut r = Report { failures: 0 };
    criteria_1_2(&mut r);
    criterion_3(&mut r);
    criterion_7(&mut r);
    criterion_8(&mut r);
    let bath = desk_bath(DESK_BATH_SIZE);
    println!("desk bath: seed {DESK_BATH_SEED}, {} spins, id {}", bath.len(), bath.id());
    criterion_5(&mut r, &bath);
    criterion_6(&mut r, &bath);
    criterion_4(&mut r, &bath);
    println!(
        "acceptance: {} of 8 criteria passed ({:.1} s)",
        8 - r.failures,
        start.elapsed().as_secs_f64()
    );
    if r.failures > 0 {
        std::process::exit(1);
    }
}
