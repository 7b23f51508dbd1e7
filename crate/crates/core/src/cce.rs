//! Generalized cluster-correlation expansion with the electron in every cluster.
//!
//! Each cluster `c` of bath spins is evolved together with the electron to
//! give `P_c(t)`. Its correlation is `P~_c = P_c / prod_{c' < c} P~_c'` over
//! all nonempty proper sub-clusters, and the order-`M` estimate of the
//! survival probability is the product of `P~_c` over every cluster with at
//! most `M` bath spins. Cluster order counts bath spins only; the electron is
//! always present on top of that.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dynamics::{evolve_survival, CurveMeta, CurveMethod, SurvivalCurve, TimeGrid};
use crate::error::{Error, Result};
use crate::hamiltonian::{cluster_hamiltonian, PhysicalConstants};
use crate::lattice::{norm, sub, SpinBath};

/// Floor applied to a correlation divisor whose magnitude falls below it.
pub const DIVISION_FLOOR: f64 = 1e-12;

const TABLE_MAGIC: &[u8; 8] = b"NVCCETB1";
const STREAM_CHUNK: usize = 2048;

/// Sorted, duplicate-free set of bath-spin indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cluster(Vec<usize>);

impl Cluster {
    /// Sorts the indices; duplicates are an error.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument(format!("duplicate index in cluster {indices:?}")));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn check_against(&self, bath_len: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= bath_len) {
            Some(i) => Err(Error::Argument(format!(
                "cluster index {i} out of range for a bath of {bath_len} spins"
            ))),
            None => Ok(()),
        }
    }
}

impl Borrow<[usize]> for Cluster {
    fn borrow(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

fn neighbor_matrix(bath: &SpinBath, cutoff: Option<f64>) -> Option<Vec<Vec<bool>>> {
    let cutoff = cutoff.filter(|c| c.is_finite())?;
    let n = bath.len();
    let p = &bath.positions;
    Some(
        (0..n)
            .map(|i| (0..n).map(|j| i != j && norm(&sub(&p[i], &p[j])) <= cutoff).collect())
            .collect(),
    )
}

/// Clusters of exactly `order` spins extending `previous` (all of order - 1).
fn extend_clusters(previous: &[Cluster], n: usize, adjacency: Option<&[Vec<bool>]>) -> Vec<Cluster> {
    let mut out = Vec::new();
    for c in previous {
        let start = c.0.last().map_or(0, |&l| l + 1);
        for j in start..n {
            if let Some(adj) = adjacency {
                if !c.0.iter().all(|&i| adj[i][j]) {
                    continue;
                }
            }
            let mut v = c.0.clone();
            v.push(j);
            out.push(Cluster(v));
        }
    }
    out
}

/// All clusters of 1..=`max_order` spins, pairwise within `pair_cutoff_nm`
/// (`None` or infinite for no cutoff), in ascending (order, lexicographic)
/// sequence. `max_order` beyond the bath size is clamped.
pub fn enumerate_clusters(bath: &SpinBath, max_order: usize, pair_cutoff_nm: Option<f64>) -> Result<Vec<Cluster>> {
    if max_order == 0 {
        return Err(Error::Argument("cluster order must be at least 1".into()));
    }
    let order = clamp_order(max_order, bath.len());
    let adjacency = neighbor_matrix(bath, pair_cutoff_nm);
    let mut all = Vec::new();
    let mut level = vec![Cluster(Vec::new())];
    for _ in 0..order {
        level = extend_clusters(&level, bath.len(), adjacency.as_deref());
        all.extend(level.iter().cloned());
    }
    Ok(all)
}

fn clamp_order(order: usize, n: usize) -> usize {
    if order > n {
        log::warn!("order {order} exceeds the bath size {n}; clamping to {n}");
        n
    } else {
        order
    }
}

/// One memoized correlation curve with its division diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationEntry {
    pub curve: Vec<f64>,
    /// Smallest divisor magnitude met while forming the curve.
    pub min_divisor: f64,
    /// Grid points where the divisor was floored.
    pub floor_hits: usize,
}

impl CorrelationEntry {
    pub fn degraded(&self) -> bool {
        self.floor_hits > 0
    }
}

/// Memo of cluster correlations on a shared time grid.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    grid: TimeGrid,
    index: HashMap<Cluster, usize>,
    entries: Vec<(Cluster, CorrelationEntry)>,
}

impl CorrelationTable {
    pub fn new(grid: TimeGrid) -> Self {
        Self {
            grid,
            index: HashMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, cluster: &[usize]) -> Option<&CorrelationEntry> {
        self.index.get(cluster).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Cluster, &CorrelationEntry)> {
        self.entries.iter().map(|(c, e)| (c, e))
    }

    /// Insert a correlation; every proper sub-cluster must already be present.
    pub fn insert(&mut self, cluster: Cluster, entry: CorrelationEntry) -> Result<()> {
        if entry.curve.len() != self.grid.len() {
            return Err(Error::Argument(format!(
                "curve has {} points, table grid has {}",
                entry.curve.len(),
                self.grid.len()
            )));
        }
        if self.index.contains_key(&cluster) {
            return Ok(());
        }
        for_each_proper_subset(cluster.indices(), |s| {
            if self.index.contains_key(s) {
                Ok(())
            } else {
                Err(Error::Argument(format!("sub-cluster {s:?} of {cluster} missing from the table")))
            }
        })?;
        self.index.insert(cluster.clone(), self.entries.len());
        self.entries.push((cluster, entry));
        Ok(())
    }

    /// `prod_{c' subset-or-equal c} P~_c'`, which reproduces `P_c`.
    pub fn reconstruct(&self, cluster: &Cluster) -> Result<Vec<f64>> {
        let own = self
            .get(cluster.indices())
            .ok_or_else(|| Error::Argument(format!("cluster {cluster} not in the table")))?;
        let mut out = own.curve.clone();
        for_each_proper_subset(cluster.indices(), |s| {
            let e = self.get(s).ok_or_else(|| Error::Argument(format!("sub-cluster {s:?} missing")))?;
            out.iter_mut().zip(&e.curve).for_each(|(o, v)| *o *= v);
            Ok(())
        })?;
        Ok(out)
    }

    pub fn degraded_count(&self) -> usize {
        self.entries.iter().filter(|(_, e)| e.degraded()).count()
    }

    pub fn save(&self, path: &Path, key: &[u8; 32]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(TABLE_MAGIC);
        buf.extend_from_slice(key);
        buf.extend_from_slice(&(self.grid.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.grid.t_end().to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (c, e) in &self.entries {
            buf.extend_from_slice(&(c.order() as u64).to_le_bytes());
            for &i in c.indices() {
                buf.extend_from_slice(&(i as u64).to_le_bytes());
            }
            buf.extend_from_slice(&e.min_divisor.to_le_bytes());
            buf.extend_from_slice(&(e.floor_hits as u64).to_le_bytes());
            for v in &e.curve {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Load a table written by [`CorrelationTable::save`]; `None` if the key
    /// does not match.
    pub fn load(path: &Path, key: &[u8; 32], grid: TimeGrid) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated table"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != TABLE_MAGIC {
            return Err(bad("not a correlation table"));
        }
        if take(32)? != key {
            return Ok(None);
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let n_points = u64_at(take(8)?) as usize;
        let t_end = f64_at(take(8)?);
        if n_points != grid.len() || t_end != grid.t_end() {
            return Ok(None);
        }
        let count = u64_at(take(8)?) as usize;
        let mut table = CorrelationTable::new(grid);
        for _ in 0..count {
            let k = u64_at(take(8)?) as usize;
            let mut idx = Vec::with_capacity(k);
            for _ in 0..k {
                idx.push(u64_at(take(8)?) as usize);
            }
            let min_divisor = f64_at(take(8)?);
            let floor_hits = u64_at(take(8)?) as usize;
            let mut curve = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                curve.push(f64_at(take(8)?));
            }
            table.insert(
                Cluster::new(idx)?,
                CorrelationEntry {
                    curve,
                    min_divisor,
                    floor_hits,
                },
            )?;
        }
        Ok(Some(table))
    }
}

/// Visit every nonempty proper subset of `indices` (as sorted slices).
fn for_each_proper_subset(indices: &[usize], mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    let k = indices.len();
    if k < 2 {
        return Ok(());
    }
    let mut buf = Vec::with_capacity(k);
    for mask in 1..(1u64 << k) - 1 {
        buf.clear();
        buf.extend((0..k).filter(|b| mask >> b & 1 == 1).map(|b| indices[b]));
        f(&buf)?;
    }
    Ok(())
}

/// `P~_c` from the exact cluster curve and the memoized sub-cluster
/// correlations.
pub fn cluster_correlation(
    cluster: &Cluster,
    table: &CorrelationTable,
    bath: &SpinBath,
    bz_gauss: f64,
    constants: &PhysicalConstants,
) -> Result<CorrelationEntry> {
    let grid = table.grid();
    let h = cluster_hamiltonian(bath, cluster, bz_gauss, constants)?;
    let p = evolve_survival(&h, grid)?.values;
    correlation_from_survival(cluster, p, table)
}

/// Divide a cluster survival curve by its sub-cluster correlations.
pub fn correlation_from_survival(
    cluster: &Cluster,
    survival: Vec<f64>,
    table: &CorrelationTable,
) -> Result<CorrelationEntry> {
    let mut divisor = vec![1.0; survival.len()];
    for_each_proper_subset(cluster.indices(), |s| {
        let e = table
            .get(s)
            .ok_or_else(|| Error::Argument(format!("sub-cluster {s:?} of {cluster} not yet computed")))?;
        divisor.iter_mut().zip(&e.curve).for_each(|(d, v)| *d *= v);
        Ok(())
    })?;
    let mut min_divisor = f64::INFINITY;
    let mut floor_hits = 0;
    let mut curve = survival;
    for (p, &d) in curve.iter_mut().zip(&divisor) {
        min_divisor = min_divisor.min(d.abs());
        let d = if d.abs() < DIVISION_FLOOR {
            floor_hits += 1;
            DIVISION_FLOOR.copysign(d)
        } else {
            d
        };
        *p /= d;
    }
    if floor_hits > 0 {
        log::warn!("cluster {cluster}: correlation divisor floored at {floor_hits} grid points (min |divisor| {min_divisor:.3e})");
    }
    Ok(CorrelationEntry {
        curve,
        min_divisor,
        floor_hits,
    })
}

/// How the final product over clusters is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Sequential in enumeration order; bit-reproducible.
    #[default]
    Deterministic,
    /// Parallel tree reduction.
    Tree,
}

#[derive(Debug, Clone)]
pub struct CceSettings {
    pub bz_gauss: f64,
    pub grid: TimeGrid,
    pub constants: PhysicalConstants,
    pub pair_cutoff_nm: Option<f64>,
    pub reduction: Reduction,
    pub cache_dir: Option<PathBuf>,
}

impl CceSettings {
    pub fn new(bz_gauss: f64, grid: TimeGrid) -> Self {
        Self {
            bz_gauss,
            grid,
            constants: PhysicalConstants::default(),
            pair_cutoff_nm: None,
            reduction: Reduction::Deterministic,
            cache_dir: None,
        }
    }
}

/// Cluster-expansion driver that keeps its correlation table across orders.
pub struct CceEngine<'a> {
    bath: &'a SpinBath,
    settings: CceSettings,
    table: CorrelationTable,
    adjacency: Option<Vec<Vec<bool>>>,
    /// Clusters of the highest stored order, the seed for the next level.
    frontier: Vec<Cluster>,
    /// Number of table entries of order <= m, indexed by m.
    counts: Vec<usize>,
    cache_key: [u8; 32],
}

impl<'a> CceEngine<'a> {
    pub fn new(bath: &'a SpinBath, settings: CceSettings) -> Result<Self> {
        settings.constants.validate()?;
        let adjacency = neighbor_matrix(bath, settings.pair_cutoff_nm);
        let cache_key = cache_key(bath, &settings);
        let mut engine = Self {
            bath,
            table: CorrelationTable::new(settings.grid),
            settings,
            adjacency,
            frontier: vec![Cluster(Vec::new())],
            counts: vec![0],
            cache_key,
        };
        engine.try_load_cache()?;
        Ok(engine)
    }

    pub fn table(&self) -> &CorrelationTable {
        &self.table
    }

    pub fn stored_order(&self) -> usize {
        self.counts.len() - 1
    }

    fn cache_path(&self) -> Option<PathBuf> {
        let hex: String = self.cache_key.iter().map(|b| format!("{b:02x}")).collect();
        self.settings
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.cct", &hex[..32])))
    }

    fn try_load_cache(&mut self) -> Result<()> {
        let Some(path) = self.cache_path() else {
            return Ok(());
        };
        if !path.exists() {
            return Ok(());
        }
        let Some(table) = CorrelationTable::load(&path, &self.cache_key, self.settings.grid)? else {
            return Ok(());
        };
        // rebuild the per-order bookkeeping
        let mut counts = vec![0];
        let mut frontier = vec![Cluster(Vec::new())];
        for (c, _) in table.entries() {
            if c.order() == counts.len() {
                counts.push(*counts.last().unwrap());
                frontier.clear();
            }
            *counts.last_mut().unwrap() += 1;
            frontier.push(c.clone());
        }
        log::info!("loaded {} cached correlations up to order {}", table.len(), counts.len() - 1);
        self.table = table;
        self.counts = counts;
        self.frontier = frontier;
        Ok(())
    }

    fn save_cache(&self) -> Result<()> {
        if let Some(path) = self.cache_path() {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            self.table.save(&path, &self.cache_key)?;
        }
        Ok(())
    }

    fn next_level(&self) -> Vec<Cluster> {
        extend_clusters(&self.frontier, self.bath.len(), self.adjacency.as_deref())
    }

    fn evaluate(&self, clusters: &[Cluster]) -> Result<Vec<CorrelationEntry>> {
        clusters
            .par_iter()
            .map(|c| cluster_correlation(c, &self.table, self.bath, self.settings.bz_gauss, &self.settings.constants))
            .collect()
    }

    /// Compute and store every correlation up to `order` (clamped to the bath).
    pub fn extend_to(&mut self, order: usize) -> Result<()> {
        let order = order.min(self.bath.len());
        let start = self.stored_order();
        while self.stored_order() < order {
            let level = self.next_level();
            let m = self.stored_order() + 1;
            let total = level.len();
            let mut done = 0;
            for chunk in level.chunks(STREAM_CHUNK) {
                let entries = self.evaluate(chunk)?;
                for (c, e) in chunk.iter().cloned().zip(entries) {
                    self.table.insert(c, e)?;
                }
                done += chunk.len();
                log::info!("order {m}: {done}/{total} clusters");
            }
            self.counts.push(self.table.len());
            self.frontier = level;
        }
        if self.stored_order() > start {
            self.save_cache()?;
        }
        Ok(())
    }

    fn product_up_to(&self, order: usize) -> (Vec<f64>, usize, usize) {
        let n = self.counts[order];
        let entries = &self.table.entries[..n];
        let degraded = entries.iter().filter(|(_, e)| e.degraded()).count();
        let ones = vec![1.0; self.settings.grid.len()];
        let product = match self.settings.reduction {
            Reduction::Deterministic => entries.iter().fold(ones, |mut acc, (_, e)| {
                acc.iter_mut().zip(&e.curve).for_each(|(a, v)| *a *= v);
                acc
            }),
            Reduction::Tree => entries
                .par_iter()
                .map(|(_, e)| e.curve.clone())
                .reduce(|| ones.clone(), |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
                    a
                }),
        };
        (product, n, degraded)
    }

    fn curve(&self, order: usize, values: Vec<f64>, clusters: usize, degraded: usize) -> SurvivalCurve {
        SurvivalCurve {
            grid: self.settings.grid,
            values,
            meta: CurveMeta {
                method: CurveMethod::Cce { order },
                bath_id: Some(self.bath.id()),
                bz_gauss: Some(self.settings.bz_gauss),
                cluster_count: clusters,
                degraded_clusters: degraded,
            },
        }
    }

    /// `P^(M)` with every correlation up to `M` kept in the table.
    pub fn survival(&mut self, order: usize) -> Result<SurvivalCurve> {
        if order == 0 {
            return Err(Error::Argument("cluster order must be at least 1".into()));
        }
        let effective = clamp_order(order, self.bath.len());
        self.extend_to(effective)?;
        let (values, n, degraded) = self.product_up_to(effective);
        Ok(self.curve(order, values, n, degraded))
    }

    /// `P^(M)` where the order-`M` correlations are folded into the product
    /// and then dropped, bounding memory by the order `M - 1` table.
    pub fn survival_streaming(&mut self, order: usize) -> Result<SurvivalCurve> {
        if order == 0 {
            return Err(Error::Argument("cluster order must be at least 1".into()));
        }
        let effective = clamp_order(order, self.bath.len());
        if effective <= self.stored_order() || effective == 0 {
            return self.survival(order);
        }
        self.extend_to(effective - 1)?;
        let (mut values, mut n, mut degraded) = self.product_up_to(effective - 1);
        let level = self.next_level();
        let total = level.len();
        let mut done = 0;
        for chunk in level.chunks(STREAM_CHUNK) {
            let entries = self.evaluate(chunk)?;
            match self.settings.reduction {
                Reduction::Deterministic => {
                    for e in &entries {
                        values.iter_mut().zip(&e.curve).for_each(|(a, v)| *a *= v);
                    }
                }
                Reduction::Tree => {
                    let part = entries
                        .par_iter()
                        .map(|e| e.curve.clone())
                        .reduce(|| vec![1.0; values.len()], |mut a, b| {
                            a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
                            a
                        });
                    values.iter_mut().zip(&part).for_each(|(a, v)| *a *= v);
                }
            }
            degraded += entries.iter().filter(|e| e.degraded()).count();
            done += chunk.len();
            log::info!("order {effective}: {done}/{total} clusters");
        }
        n += total;
        Ok(self.curve(order, values, n, degraded))
    }
}

fn cache_key(bath: &SpinBath, s: &CceSettings) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"nvcce-table-v1");
    h.update(bath.id().as_bytes());
    h.update((bath.len() as u64).to_le_bytes());
    for p in &bath.positions {
        for c in p {
            h.update(c.to_bits().to_le_bytes());
        }
    }
    h.update(s.bz_gauss.to_bits().to_le_bytes());
    h.update(s.grid.t_end().to_bits().to_le_bytes());
    h.update((s.grid.len() as u64).to_le_bytes());
    let k = &s.constants;
    for v in [k.zero_field_splitting, k.gamma_e, k.gamma_c, k.mu0, k.hbar] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(s.pair_cutoff_nm.unwrap_or(f64::INFINITY).to_bits().to_le_bytes());
    h.finalize().into()
}

/// Order-`M` truncated survival probability.
pub fn cce_survival(bath: &SpinBath, order: usize, settings: &CceSettings) -> Result<SurvivalCurve> {
    if order == 0 {
        return Err(Error::Argument("cluster order must be at least 1".into()));
    }
    let mut engine = CceEngine::new(bath, settings.clone())?;
    if bath.is_empty() {
        return Ok(engine.curve(order, vec![1.0; settings.grid.len()], 0, 0));
    }
    engine.survival_streaming(order)
}

/// Successive maximum pointwise differences between orders.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub orders: Vec<usize>,
    pub curves: Vec<SurvivalCurve>,
    /// `(M_i, M_{i+1}, max_t |P^(M_i) - P^(M_{i+1})|)`.
    pub diffs: Vec<(usize, usize, f64)>,
}

impl ConvergenceReport {
    pub fn diff(&self, lo: usize, hi: usize) -> Option<f64> {
        self.diffs.iter().find(|d| d.0 == lo && d.1 == hi).map(|d| d.2)
    }
}

/// Evaluate `P^(M)` for ascending `orders`, sharing one correlation table.
pub fn convergence_scan(bath: &SpinBath, orders: &[usize], settings: &CceSettings) -> Result<ConvergenceReport> {
    if orders.is_empty() || orders.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!("orders must be nonempty and strictly ascending, got {orders:?}")));
    }
    if orders[0] == 0 {
        return Err(Error::Argument("cluster order must be at least 1".into()));
    }
    let mut engine = CceEngine::new(bath, settings.clone())?;
    let mut curves = Vec::with_capacity(orders.len());
    for (i, &m) in orders.iter().enumerate() {
        let curve = if bath.is_empty() {
            engine.curve(m, vec![1.0; settings.grid.len()], 0, 0)
        } else if i + 1 == orders.len() {
            engine.survival_streaming(m)?
        } else {
            engine.survival(m)?
        };
        curves.push(curve);
    }
    let diffs = orders
        .windows(2)
        .zip(curves.windows(2))
        .map(|(o, c)| (o[0], o[1], c[0].max_abs_diff(&c[1])))
        .collect();
    Ok(ConvergenceReport {
        orders: orders.to_vec(),
        curves,
        diffs,
    })
}
