//! Command-line front end.
//!
//! Every command resolves its inputs from an optional `--config` file with
//! command-line flags layered on top, and writes the resolved configuration
//! into the output directory so the run can be repeated from that file alone.

pub mod checks;
pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{field_sweep, resonance_field, write_sweep_csv};
use crate::cce::{cce_survival, convergence_scan, CceSettings, Reduction};
use crate::dynamics::{SurvivalCurve, TimeGrid};
use crate::error::{Error, Result};
use crate::hamiltonian::PhysicalConstants;
use crate::lattice::{load_bath, sample_bath, save_bath, SpinBath};
use crate::oracle::{exact_survival, OracleOptions};

pub use config::{Config, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;
pub const EXIT_EMPTY_BATH: i32 = 6;

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Validation(_) => EXIT_CONFIG,
        Error::Capacity { .. } => EXIT_CAPACITY,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        Error::Contract(_) | Error::Singular(_) | Error::Eigen(_) | Error::Search(_) => EXIT_NUMERICAL,
        Error::EmptyBath => EXIT_EMPTY_BATH,
    }
}

#[derive(Debug, Parser)]
#[command(name = "nvcce", version, about = "Cluster-correlation expansion of NV-center T1 relaxation in a 13C bath")]
pub struct Cli {
    /// Worker threads for cluster evaluation.
    #[arg(long, global = true, env = "NVCCE_THREADS")]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a random 13C bath and save it.
    GenerateBath(GenerateArgs),
    /// Survival curves for each field.
    Run(RunArgs),
    /// Fitted 1/T1 across a range of fields.
    Sweep(SweepArgs),
    /// Order and bath-size convergence scans.
    Convergence(ConvergenceArgs),
    /// Oracle equivalence and numerical contract checks.
    Validate(ValidateArgs),
    /// Print the physical constants and resonance fields.
    ShowConstants,
}

/// Inputs shared by every simulation command.
#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Configuration file (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Bath file to load instead of sampling one.
    #[arg(long)]
    pub bath: Option<PathBuf>,
    /// Bath sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// 13C fraction of lattice sites.
    #[arg(long)]
    pub abundance: Option<f64>,
    /// Keep only this many spins nearest the NV.
    #[arg(long)]
    pub max_spins: Option<usize>,
    /// Radius of the sampled shell in nm.
    #[arg(long)]
    pub shell_radius_nm: Option<f64>,
    /// Minimum distance from the NV in nm.
    #[arg(long)]
    pub exclusion_radius_nm: Option<f64>,
    /// End of the time grid in microseconds.
    #[arg(long)]
    pub t_end_us: Option<f64>,
    /// Number of time samples, including t = 0.
    #[arg(long)]
    pub points: Option<usize>,
    /// Fixed-order sequential reductions (bit-reproducible across thread counts).
    #[arg(long)]
    pub deterministic: Option<bool>,
    /// Directory for the correlation cache.
    #[arg(long, env = "NVCCE_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Bath file to write (defaults to `<out-dir>/bath.txt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Magnetic field(s) in gauss.
    #[arg(long, value_delimiter = ',')]
    pub bz: Vec<f64>,
    /// Maximum number of bath spins per cluster.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub order: Option<u64>,
    /// Survival from the expansion, the exact oracle, or both.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// First field of the sweep in gauss.
    #[arg(long)]
    pub from: Option<f64>,
    /// Last field of the sweep in gauss.
    #[arg(long)]
    pub to: Option<f64>,
    /// Number of evenly spaced fields.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    /// Explicit field list in gauss (overrides the range).
    #[arg(long, value_delimiter = ',')]
    pub fields: Vec<f64>,
    /// Maximum number of bath spins per cluster.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub order: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Magnetic field in gauss.
    #[arg(long)]
    pub bz: Option<f64>,
    /// Orders to compare, ascending.
    #[arg(long, value_delimiter = ',')]
    pub orders: Vec<usize>,
    /// Bath sizes for the size scan, ascending.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// End of the time grid in microseconds.
    #[arg(long)]
    pub t_end_us: Option<f64>,
    /// Number of time samples.
    #[arg(long)]
    pub points: Option<usize>,
}

fn resolve_common(common: &CommonArgs, threads: Option<usize>) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let b = &mut cfg.bath;
    if let Some(p) = &common.bath {
        b.path = Some(p.clone());
    }
    if let Some(v) = common.seed {
        b.seed = v;
    }
    if let Some(v) = common.abundance {
        b.abundance = v;
    }
    if let Some(v) = common.max_spins {
        b.max_spins = Some(v);
    }
    if let Some(v) = common.shell_radius_nm {
        b.shell_radius_nm = v;
    }
    if let Some(v) = common.exclusion_radius_nm {
        b.exclusion_radius_nm = v;
    }
    if let Some(v) = common.t_end_us {
        cfg.grid.t_end_us = v;
    }
    if let Some(v) = common.points {
        cfg.grid.points = v;
    }
    let e = &mut cfg.execution;
    if let Some(v) = common.deterministic {
        e.deterministic = v;
    }
    if let Some(v) = &common.cache_dir {
        e.cache_dir = Some(v.clone());
    }
    if let Some(v) = &common.out_dir {
        e.output_dir = v.clone();
    }
    if threads.is_some() {
        e.threads = threads;
    }
    Ok(cfg)
}

fn load_or_sample(cfg: &Config) -> Result<SpinBath> {
    match &cfg.bath.path {
        Some(p) => load_bath(p),
        None => sample_bath(&cfg.bath.lattice()),
    }
}

fn settings(cfg: &Config, bz: f64, grid: TimeGrid) -> CceSettings {
    CceSettings {
        reduction: if cfg.execution.deterministic {
            Reduction::Deterministic
        } else {
            Reduction::Tree
        },
        cache_dir: cfg.execution.cache_dir.clone(),
        ..CceSettings::new(bz, grid)
    }
}

/// File name of a curve: one per field and order.
pub fn curve_file_name(bz: f64, order: Option<usize>) -> String {
    match order {
        Some(m) => format!("curve_bz{bz}_M{m}.csv"),
        None => format!("curve_bz{bz}_exact.csv"),
    }
}

fn describe_bath(bath: &SpinBath) -> String {
    format!(
        "{} spins, nearest {:.4} nm, farthest {:.4} nm, id {}",
        bath.len(),
        bath.min_distance().unwrap_or(f64::NAN),
        bath.max_distance().unwrap_or(f64::NAN),
        bath.id()
    )
}

pub fn cmd_generate_bath(args: &GenerateArgs, threads: Option<usize>) -> Result<PathBuf> {
    let cfg = resolve_common(&args.common, threads)?;
    cfg.validate()?;
    let bath = sample_bath(&cfg.bath.lattice())?;
    if bath.is_empty() {
        return Err(Error::EmptyBath);
    }
    let dir = &cfg.execution.output_dir;
    let path = args.out.clone().unwrap_or_else(|| dir.join("bath.txt"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_bath(&bath, &path)?;
    if args.out.is_none() {
        cfg.echo(dir)?;
    }
    println!("{}", describe_bath(&bath));
    println!("wrote {}", path.display());
    Ok(path)
}

/// Curves written by [`cmd_run`], in field order.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub curves: Vec<SurvivalCurve>,
}

pub fn cmd_run(args: &RunArgs, threads: Option<usize>) -> Result<RunOutput> {
    let mut cfg = resolve_common(&args.common, threads)?;
    if !args.bz.is_empty() {
        cfg.run.bz_gauss = args.bz.clone();
    }
    if let Some(m) = args.order {
        cfg.run.order = m as usize;
    }
    if let Some(m) = args.mode {
        cfg.run.mode = m;
    }
    cfg.validate()?;
    if cfg.run.bz_gauss.is_empty() {
        return Err(Error::Config("no field given".into()));
    }
    let bath = load_or_sample(&cfg)?;
    if cfg.run.mode != Mode::Cce && bath.len() > cfg.run.oracle_cap {
        return Err(Error::Capacity {
            what: "oracle bath size",
            requested: bath.len(),
            cap: cfg.run.oracle_cap,
        });
    }
    let grid = cfg.grid.grid()?;
    let dir = cfg.execution.output_dir.clone();
    cfg.echo(&dir)?;
    log::info!("bath: {}", describe_bath(&bath));
    let mut out = RunOutput {
        files: Vec::new(),
        curves: Vec::new(),
    };
    for &bz in &cfg.run.bz_gauss {
        let mut pair = Vec::new();
        if cfg.run.mode != Mode::Exact {
            let curve = cce_survival(&bath, cfg.run.order, &settings(&cfg, bz, grid))?;
            if curve.meta.degraded_clusters > 0 {
                log::warn!(
                    "Bz = {bz} G: {} of {} clusters hit the division floor",
                    curve.meta.degraded_clusters,
                    curve.meta.cluster_count
                );
            }
            let path = dir.join(curve_file_name(bz, Some(cfg.run.order)));
            curve.write_csv(&path)?;
            out.files.push(path);
            pair.push(curve);
        }
        if cfg.run.mode != Mode::Cce {
            let opts = OracleOptions {
                cap: cfg.run.oracle_cap,
                ..OracleOptions::default()
            };
            let curve = exact_survival(&bath, bz, &grid, &opts)?;
            let path = dir.join(curve_file_name(bz, None));
            curve.write_csv(&path)?;
            out.files.push(path);
            pair.push(curve);
        }
        if let [a, b] = pair.as_slice() {
            println!("Bz = {bz} G: max |P_cce - P_exact| = {:.3e}", a.max_abs_diff(b));
        }
        out.curves.extend(pair);
    }
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    Ok(out)
}

pub fn cmd_sweep(args: &SweepArgs, threads: Option<usize>) -> Result<PathBuf> {
    let mut cfg = resolve_common(&args.common, threads)?;
    if let Some(v) = args.from {
        cfg.sweep.from_gauss = Some(v);
    }
    if let Some(v) = args.to {
        cfg.sweep.to_gauss = Some(v);
    }
    if let Some(v) = args.steps {
        cfg.sweep.steps = Some(v as usize);
    }
    if !args.fields.is_empty() {
        cfg.sweep.fields_gauss = args.fields.clone();
    }
    if let Some(m) = args.order {
        cfg.run.order = m as usize;
    }
    cfg.validate()?;
    let fields = cfg.sweep.fields()?;
    let bath = load_or_sample(&cfg)?;
    let grid = cfg.grid.grid()?;
    let dir = cfg.execution.output_dir.clone();
    cfg.echo(&dir)?;
    let rows = field_sweep(&bath, cfg.run.order, &fields, &grid, &settings(&cfg, fields[0], grid))?;
    let path = dir.join(format!("sweep_M{}.csv", cfg.run.order));
    write_sweep_csv(&rows, &path)?;
    for r in &rows {
        match &r.fit {
            Ok(f) => println!("{:>12} G  1/T1 = {:.6e} /us  residual {:.3e}{}", r.bz_gauss, f.inv_t1(), f.rms_residual, if f.converged { "" } else { "  (not converged)" }),
            Err(e) => println!("{:>12} G  failed: {e}", r.bz_gauss),
        }
    }
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_convergence(args: &ConvergenceArgs, threads: Option<usize>) -> Result<PathBuf> {
    let mut cfg = resolve_common(&args.common, threads)?;
    if let Some(b) = args.bz {
        cfg.run.bz_gauss = vec![b];
    }
    if !args.orders.is_empty() {
        cfg.convergence.orders = args.orders.clone();
    }
    if !args.sizes.is_empty() {
        cfg.convergence.sizes = args.sizes.clone();
    }
    cfg.validate()?;
    let Some(&bz) = cfg.run.bz_gauss.first() else {
        return Err(Error::Config("no field given".into()));
    };
    let orders = cfg.convergence.orders.clone();
    let bath = load_or_sample(&cfg)?;
    let grid = cfg.grid.grid()?;
    let dir = cfg.execution.output_dir.clone();
    cfg.echo(&dir)?;
    let s = settings(&cfg, bz, grid);

    let report = convergence_scan(&bath, &orders, &s)?;
    for c in &report.curves {
        if let crate::dynamics::CurveMethod::Cce { order } = c.meta.method {
            c.write_csv(&dir.join(curve_file_name(bz, Some(order))))?;
        }
    }
    let mut table = String::new();
    let _ = writeln!(table, "# format = nvcce-convergence/1");
    let _ = writeln!(table, "# bz_gauss = {bz}");
    let _ = writeln!(table, "# bath_id = {}", bath.id());
    let _ = writeln!(table, "scan,lo,hi,max_abs_diff");
    for (lo, hi, d) in &report.diffs {
        let _ = writeln!(table, "order,{lo},{hi},{d}");
        println!("orders {lo} -> {hi}: max |dP| = {d:.6e}");
    }

    let sizes = cfg.convergence.sizes.clone();
    if !sizes.is_empty() {
        if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
            return Err(Error::Config(format!("sizes must be positive and ascending, got {sizes:?}")));
        }
        let order = *orders.last().expect("nonempty orders");
        let mut previous: Option<SurvivalCurve> = None;
        for (i, &k) in sizes.iter().enumerate() {
            if k > bath.len() {
                return Err(Error::Config(format!("size {k} exceeds the bath ({} spins)", bath.len())));
            }
            let sub = bath.nearest(k);
            let curve = cce_survival(&sub, order, &s)?;
            if let Some(p) = &previous {
                let d = p.max_abs_diff(&curve);
                let _ = writeln!(table, "size,{},{k},{d}", sizes[i - 1]);
                println!("sizes {} -> {k}: max |dP| = {d:.6e}", sizes[i - 1]);
            }
            previous = Some(curve);
        }
    }
    let path = dir.join("convergence.csv");
    std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(path)
}

/// Returns whether every check passed.
pub fn cmd_validate(args: &ValidateArgs) -> Result<bool> {
    let d = TimeGrid::default();
    let grid = TimeGrid::new(args.t_end_us.unwrap_or(d.t_end()), args.points.unwrap_or(d.len()))?;
    let outcomes = checks::validation_suite(&grid)?;
    for o in &outcomes {
        println!("{}", o.line());
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

pub fn cmd_show_constants() -> Result<()> {
    let k = PhysicalConstants::default();
    println!("{}", k.describe());
    for r in resonance_field(&k)? {
        println!("resonance field: {r:.9} G");
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let t = cli.threads;
    match &cli.command {
        Command::GenerateBath(a) => cmd_generate_bath(a, t).map(|_| EXIT_OK),
        Command::Run(a) => cmd_run(a, t).map(|_| EXIT_OK),
        Command::Sweep(a) => cmd_sweep(a, t).map(|_| EXIT_OK),
        Command::Convergence(a) => cmd_convergence(a, t).map(|_| EXIT_OK),
        Command::Validate(a) => cmd_validate(a).map(|ok| if ok { EXIT_OK } else { EXIT_NUMERICAL }),
        Command::ShowConstants => cmd_show_constants().map(|_| EXIT_OK),
    }
}

fn thread_count(cli: &Cli) -> Result<Option<usize>> {
    if cli.threads == Some(0) {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    let from_config = match &cli.command {
        Command::GenerateBath(GenerateArgs { common, .. })
        | Command::Run(RunArgs { common, .. })
        | Command::Sweep(SweepArgs { common, .. })
        | Command::Convergence(ConvergenceArgs { common, .. }) => match &common.config {
            Some(p) => Config::load(p)?.execution.threads,
            None => None,
        },
        _ => None,
    };
    Ok(cli.threads.or(from_config))
}

fn run_cli(cli: &Cli) -> Result<i32> {
    match thread_count(cli)? {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run_cli(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolve the configuration a command would use, without running it.
pub fn resolved_config(path: Option<&Path>) -> Result<Config> {
    let common = CommonArgs {
        config: path.map(Path::to_path_buf),
        ..CommonArgs::default()
    };
    resolve_common(&common, None)
}
