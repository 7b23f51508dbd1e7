//! Diamond-lattice enumeration and random 13C bath sampling.
//!
//! Coordinates are expressed in the NV frame: the vacancy sits at the
//! origin, the nitrogen at `a/4 (1,1,1)` in the crystal frame, and the
//! crystal `[111]` direction is mapped onto `+z`. All lengths are in nm.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub const BATH_FORMAT: &str = "nvcce-bath/1";

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Conventional-cell basis of the diamond structure in units of the
/// lattice constant (fcc positions plus the (1/4,1/4,1/4) copy).
pub const DIAMOND_BASIS: [Vec3; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
    [0.25, 0.25, 0.25],
    [0.25, 0.75, 0.75],
    [0.75, 0.25, 0.75],
    [0.75, 0.75, 0.25],
];

/// Rotate a crystal-frame vector into the NV frame (`[111]` -> `z`).
pub fn crystal_to_nv_frame(r: &Vec3) -> Vec3 {
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    let s3 = 3f64.sqrt();
    [
        (r[0] + r[1] - 2.0 * r[2]) / s6,
        (-r[0] + r[1]) / s2,
        (r[0] + r[1] + r[2]) / s3,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeConfig {
    pub lattice_constant_nm: f64,
    pub shell_radius_nm: f64,
    pub exclusion_radius_nm: f64,
    pub abundance: f64,
    pub max_spins: Option<usize>,
    pub seed: u64,
    /// Hard cap on the number of candidate sites inside the shell.
    pub max_candidate_sites: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            lattice_constant_nm: 0.3567,
            shell_radius_nm: 4.0,
            exclusion_radius_nm: 0.5,
            abundance: 0.011,
            max_spins: Some(50),
            seed: 1,
            max_candidate_sites: 2_000_000,
        }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lattice_constant_nm > 0.0) || !self.lattice_constant_nm.is_finite() {
            return Err(Error::Config(format!(
                "lattice constant must be positive, got {}",
                self.lattice_constant_nm
            )));
        }
        if !(0.0..=1.0).contains(&self.abundance) {
            return Err(Error::Config(format!(
                "abundance must lie in [0, 1], got {}",
                self.abundance
            )));
        }
        if !(self.exclusion_radius_nm >= 0.0) || !self.shell_radius_nm.is_finite() {
            return Err(Error::Config(format!(
                "radii must be finite and non-negative (exclusion {}, shell {})",
                self.exclusion_radius_nm, self.shell_radius_nm
            )));
        }
        Ok(())
    }

    fn estimated_sites(&self) -> f64 {
        let a = self.lattice_constant_nm;
        8.0 / (a * a * a) * 4.0 / 3.0 * std::f64::consts::PI * self.shell_radius_nm.powi(3)
    }
}

/// All diamond carbon sites with `exclusion <= |r| <= shell`, excluding the
/// vacancy and nitrogen sites, sorted by distance from the origin.
pub fn generate_sites(config: &LatticeConfig) -> Result<Vec<Vec3>> {
    config.validate()?;
    if config.shell_radius_nm < config.exclusion_radius_nm {
        return Ok(Vec::new());
    }
    let cap = config.max_candidate_sites;
    // the continuum estimate undercounts by a boundary term only
    let estimate = config.estimated_sites();
    if estimate > 1.5 * cap as f64 + 1000.0 {
        return Err(Error::Capacity {
            what: "candidate lattice sites",
            requested: estimate as usize,
            cap,
        });
    }

    let a = config.lattice_constant_nm;
    let r2_max = config.shell_radius_nm * config.shell_radius_nm;
    let r2_min = config.exclusion_radius_nm * config.exclusion_radius_nm;
    let m = (config.shell_radius_nm / a).ceil() as i64 + 1;
    let nitrogen = [0.25, 0.25, 0.25];

    let mut sites = Vec::new();
    for i in -m..=m {
        for j in -m..=m {
            for k in -m..=m {
                for b in DIAMOND_BASIS.iter() {
                    let frac = [i as f64 + b[0], j as f64 + b[1], k as f64 + b[2]];
                    if frac == [0.0, 0.0, 0.0] || frac == nitrogen {
                        continue;
                    }
                    let r = [a * frac[0], a * frac[1], a * frac[2]];
                    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                    if r2 > r2_max || r2 < r2_min {
                        continue;
                    }
                    sites.push(crystal_to_nv_frame(&r));
                    if sites.len() > cap {
                        return Err(Error::Capacity {
                            what: "candidate lattice sites",
                            requested: sites.len(),
                            cap,
                        });
                    }
                }
            }
        }
    }
    sort_by_distance(&mut sites);
    Ok(sites)
}

fn sort_by_distance(sites: &mut [Vec3]) {
    sites.sort_by(|p, q| {
        let dp = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        let dq = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
        dp.total_cmp(&dq)
            .then(p[0].total_cmp(&q[0]))
            .then(p[1].total_cmp(&q[1]))
            .then(p[2].total_cmp(&q[2]))
    });
}

/// A 13C nuclear-spin bath around an NV center at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinBath {
    /// Positions in nm, sorted by ascending distance from the NV.
    pub positions: Vec<Vec3>,
    pub config: LatticeConfig,
    /// Field the bath was generated for, if any (provenance only).
    pub bz_gauss: Option<f64>,
}

impl SpinBath {
    /// Build a bath from explicit positions, checking the invariants.
    pub fn from_positions(positions: Vec<Vec3>, config: LatticeConfig) -> Result<Self> {
        let bath = Self {
            positions,
            config,
            bz_gauss: None,
        };
        bath.validate()?;
        Ok(bath)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// The `k` spins nearest to the NV.
    pub fn nearest(&self, k: usize) -> SpinBath {
        let mut out = self.clone();
        out.positions.truncate(k);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let excl = self.config.exclusion_radius_nm;
        let mut prev = f64::NEG_INFINITY;
        for (i, p) in self.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!("spin {i} has a non-finite coordinate")));
            }
            let r = norm(p);
            if r < excl {
                return Err(Error::Validation(format!(
                    "spin {i} at {r} nm lies inside the exclusion radius {excl} nm"
                )));
            }
            if r < prev {
                return Err(Error::Validation(format!(
                    "spin {i} breaks ascending-distance order"
                )));
            }
            prev = r;
        }
        // sorted by distance, so duplicates can only sit among equal radii
        for i in 0..self.positions.len() {
            let ri = norm(&self.positions[i]);
            for j in i + 1..self.positions.len() {
                if norm(&self.positions[j]) > ri {
                    break;
                }
                if self.positions[i] == self.positions[j] {
                    return Err(Error::Validation(format!(
                        "spins {i} and {j} share the position {:?}",
                        self.positions[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Short content hash identifying the bath geometry and provenance.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        for p in &self.positions {
            for c in p {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn min_distance(&self) -> Option<f64> {
        self.positions.first().map(norm)
    }

    pub fn max_distance(&self) -> Option<f64> {
        self.positions.last().map(norm)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
        let _ = writeln!(s, "# nvcce spin bath; NV at origin, z along the NV axis");
        let _ = writeln!(s, "format = {BATH_FORMAT}");
        let _ = writeln!(s, "units = nm");
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "lattice_constant_nm = {}", c.lattice_constant_nm);
        let _ = writeln!(s, "shell_radius_nm = {}", c.shell_radius_nm);
        let _ = writeln!(s, "exclusion_radius_nm = {}", c.exclusion_radius_nm);
        let _ = writeln!(s, "abundance = {}", c.abundance);
        let _ = writeln!(s, "max_spins = {}", opt(c.max_spins.map(|v| v.to_string())));
        let _ = writeln!(s, "max_candidate_sites = {}", c.max_candidate_sites);
        let _ = writeln!(s, "bz_gauss = {}", opt(self.bz_gauss.map(|v| v.to_string())));
        let _ = writeln!(s, "spins = {}", self.positions.len());
        let _ = writeln!(s, "# index x_nm y_nm z_nm");
        for (i, p) in self.positions.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut config = LatticeConfig {
            max_spins: None,
            ..LatticeConfig::default()
        };
        let mut bz_gauss = None;
        let mut format_seen = false;
        let mut expected: Option<usize> = None;
        let mut positions = Vec::new();
        let mut seen = [false; 6];

        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(n) = expected {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 4 {
                    return Err(perr(line_no, format!("expected 4 columns, found {}", fields.len())));
                }
                let idx: usize = fields[0]
                    .parse()
                    .map_err(|_| perr(line_no, format!("bad spin index {:?}", fields[0])))?;
                if idx != positions.len() {
                    return Err(perr(line_no, format!("spin index {idx} out of sequence")));
                }
                if positions.len() == n {
                    return Err(perr(line_no, format!("more than the declared {n} spins")));
                }
                let mut p = [0.0; 3];
                for (c, f) in p.iter_mut().zip(&fields[1..]) {
                    *c = f.parse().map_err(|_| perr(line_no, format!("bad coordinate {f:?}")))?;
                }
                positions.push(p);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(line_no, format!("expected `key = value`, got {line:?}")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| perr(line_no, format!("bad number for {key}: {v:?}")))
            };
            match key {
                "format" => {
                    if value != BATH_FORMAT {
                        return Err(perr(line_no, format!("unsupported format tag {value:?}")));
                    }
                    format_seen = true;
                }
                "units" => {
                    if value != "nm" {
                        return Err(perr(line_no, format!("unsupported units {value:?}")));
                    }
                }
                "seed" => {
                    config.seed = value
                        .parse()
                        .map_err(|_| perr(line_no, format!("bad seed {value:?}")))?;
                    seen[0] = true;
                }
                "lattice_constant_nm" => {
                    config.lattice_constant_nm = num(value)?;
                    seen[1] = true;
                }
                "shell_radius_nm" => {
                    config.shell_radius_nm = num(value)?;
                    seen[2] = true;
                }
                "exclusion_radius_nm" => {
                    config.exclusion_radius_nm = num(value)?;
                    seen[3] = true;
                }
                "abundance" => {
                    config.abundance = num(value)?;
                    seen[4] = true;
                }
                "max_spins" => {
                    config.max_spins = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| perr(line_no, format!("bad max_spins {value:?}")))?)
                    };
                }
                "max_candidate_sites" => {
                    config.max_candidate_sites = value
                        .parse()
                        .map_err(|_| perr(line_no, format!("bad max_candidate_sites {value:?}")))?;
                }
                "bz_gauss" => {
                    bz_gauss = if value == "none" { None } else { Some(num(value)?) };
                }
                "spins" => {
                    expected = Some(
                        value
                            .parse()
                            .map_err(|_| perr(line_no, format!("bad spin count {value:?}")))?,
                    );
                    seen[5] = true;
                }
                other => return Err(perr(line_no, format!("unknown key {other:?}"))),
            }
        }
        if !format_seen {
            return Err(perr(0, "missing format tag".into()));
        }
        const KEYS: [&str; 6] = [
            "seed",
            "lattice_constant_nm",
            "shell_radius_nm",
            "exclusion_radius_nm",
            "abundance",
            "spins",
        ];
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(perr(0, format!("missing required key {}", KEYS[i])));
        }
        let n = expected.unwrap_or(0);
        if positions.len() != n {
            return Err(perr(0, format!("declared {n} spins, found {}", positions.len())));
        }
        config.validate()?;
        let mut bath = SpinBath::from_positions(positions, config)?;
        bath.bz_gauss = bz_gauss;
        Ok(bath)
    }
}

/// Occupy each candidate site independently with probability `abundance`.
pub fn sample_bath(config: &LatticeConfig) -> Result<SpinBath> {
    let sites = generate_sites(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut positions: Vec<Vec3> = sites
        .into_iter()
        .filter(|_| rng.random::<f64>() < config.abundance)
        .collect();
    if let Some(k) = config.max_spins {
        positions.truncate(k);
    }
    Ok(SpinBath {
        positions,
        config: config.clone(),
        bz_gauss: None,
    })
}

pub fn save_bath(bath: &SpinBath, path: &Path) -> Result<()> {
    std::fs::write(path, bath.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_bath(path: &Path) -> Result<SpinBath> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SpinBath::from_text(&text, path)
}
