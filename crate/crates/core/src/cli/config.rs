//! Run configuration file: TOML with one section per concern and every unit
//! spelled out in the key name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::lattice::LatticeConfig;
use crate::oracle::DEFAULT_CAP;

pub const CONFIG_FORMAT: &str = "nvcce-config/1";
pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Cce,
    Exact,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BathSection {
    /// Bath file to load; when absent the bath is sampled from the fields below.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub abundance: f64,
    pub lattice_constant_nm: f64,
    pub shell_radius_nm: f64,
    pub exclusion_radius_nm: f64,
    pub max_spins: Option<usize>,
    pub max_candidate_sites: usize,
}

impl Default for BathSection {
    fn default() -> Self {
        let l = LatticeConfig::default();
        Self {
            path: None,
            seed: l.seed,
            abundance: l.abundance,
            lattice_constant_nm: l.lattice_constant_nm,
            shell_radius_nm: l.shell_radius_nm,
            exclusion_radius_nm: l.exclusion_radius_nm,
            max_spins: l.max_spins,
            max_candidate_sites: l.max_candidate_sites,
        }
    }
}

impl BathSection {
    pub fn lattice(&self) -> LatticeConfig {
        LatticeConfig {
            lattice_constant_nm: self.lattice_constant_nm,
            shell_radius_nm: self.shell_radius_nm,
            exclusion_radius_nm: self.exclusion_radius_nm,
            abundance: self.abundance,
            max_spins: self.max_spins,
            seed: self.seed,
            max_candidate_sites: self.max_candidate_sites,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub t_end_us: f64,
    pub points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = TimeGrid::default();
        Self {
            t_end_us: g.t_end(),
            points: g.len(),
        }
    }
}

impl GridSection {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_end_us, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub bz_gauss: Vec<f64>,
    pub order: usize,
    pub mode: Mode,
    pub oracle_cap: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            bz_gauss: vec![1024.975],
            order: 4,
            mode: Mode::Cce,
            oracle_cap: DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub from_gauss: Option<f64>,
    pub to_gauss: Option<f64>,
    pub steps: Option<usize>,
    /// Explicit field list; takes precedence over the linear range.
    pub fields_gauss: Vec<f64>,
}

impl SweepSection {
    pub fn fields(&self) -> Result<Vec<f64>> {
        if !self.fields_gauss.is_empty() {
            return Ok(self.fields_gauss.clone());
        }
        let (Some(from), Some(to), Some(steps)) = (self.from_gauss, self.to_gauss, self.steps) else {
            return Err(Error::Config(
                "sweep needs either fields_gauss or from_gauss, to_gauss and steps".into(),
            ));
        };
        if steps == 0 {
            return Err(Error::Config("sweep steps must be at least 1".into()));
        }
        if steps == 1 {
            return Ok(vec![from]);
        }
        let h = (to - from) / (steps - 1) as f64;
        Ok((0..steps)
            .map(|i| if i + 1 == steps { to } else { from + h * i as f64 })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub orders: Vec<usize>,
    /// Bath sizes (nearest spins kept) for the size scan; empty skips it.
    pub sizes: Vec<usize>,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        Self {
            orders: vec![1, 2, 3, 4],
            sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionSection {
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExecutionSection {
    fn default() -> Self {
        Self {
            deterministic: true,
            threads: None,
            cache_dir: None,
            output_dir: PathBuf::from("nvcce-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format: String,
    pub bath: BathSection,
    pub grid: GridSection,
    pub run: RunSection,
    pub sweep: SweepSection,
    pub convergence: ConvergenceSection,
    pub execution: ExecutionSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.to_string(),
            bath: BathSection::default(),
            grid: GridSection::default(),
            run: RunSection::default(),
            sweep: SweepSection::default(),
            convergence: ConvergenceSection::default(),
            execution: ExecutionSection::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.format != CONFIG_FORMAT {
            return Err(Error::Config(format!(
                "unsupported config format {:?}, expected {CONFIG_FORMAT:?}",
                cfg.format
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Check the fields every command relies on.
    pub fn validate(&self) -> Result<()> {
        self.bath.lattice().validate()?;
        self.grid.grid()?;
        if self.run.order == 0 {
            return Err(Error::Config("order must be at least 1".into()));
        }
        if self.run.bz_gauss.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("bz_gauss values must be finite".into()));
        }
        if self.execution.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(p) = &self.bath.path {
            if !p.exists() {
                return Err(Error::Config(format!("bath file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Write the resolved configuration next to the outputs.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
