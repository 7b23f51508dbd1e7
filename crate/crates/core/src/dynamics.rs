//! Exact unitary evolution of a cluster and the `|0>` survival probability.
//!
//! The cluster starts in `|0><0| (x) 1/2^k` and the survival probability is
//! `P(t) = Tr[rho(0) U^dagger(t) (|0><0| (x) 1) U(t)]`. With `H = V L V^dagger`
//! and `W = V0^dagger V0`, where `V0` holds the rows of `V` with the electron in
//! `|0>`, this reduces to
//!
//! ```text
//! P(t) = 2^-k sum_mn |W_mn|^2 exp(-i (l_m - l_n) t)
//! ```
//!
//! so one diagonalization serves the whole time grid.

use std::fmt::Write as _;
use std::path::Path;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par, Side};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::hamiltonian::{electron_zero_rows, nv_hamiltonian, HermitianOperator, PhysicalConstants};

pub const CURVE_FORMAT: &str = "nvcce-curve/1";

/// Largest tolerated imaginary residue of `P(t)` before it is discarded.
pub const IMAGINARY_TOLERANCE: f64 = 1e-10;
/// Tolerated excursion of `P(t)` outside `[0, 1]`.
pub const BOUNDS_TOLERANCE: f64 = 1e-10;
/// Relative tolerance for accepting an operator as Hermitian.
pub const HERMITIAN_TOLERANCE: f64 = 1e-12;

/// Uniform time grid starting at `t = 0`, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end_us: f64,
    n_points: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            t_end_us: 20.0,
            n_points: 1001,
        }
    }
}

impl TimeGrid {
    pub fn new(t_end_us: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::Config(format!("time grid needs at least 2 points, got {n_points}")));
        }
        if !(t_end_us > 0.0) || !t_end_us.is_finite() {
            return Err(Error::Config(format!("t_end must be positive, got {t_end_us}")));
        }
        Ok(Self { t_end_us, n_points })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end_us
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.t_end_us / (self.n_points - 1) as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        if j + 1 == self.n_points {
            self.t_end_us
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn samples(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.t(j)).collect()
    }

    /// Same grid with every time scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.t_end_us * c, self.n_points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveMethod {
    /// A single cluster evolved exactly.
    Cluster,
    /// Truncated cluster-correlation expansion of the given order.
    Cce { order: usize },
    /// Brute-force evolution of the full system.
    Exact,
}

impl CurveMethod {
    pub fn label(&self) -> &'static str {
        match self {
            CurveMethod::Cluster => "cluster",
            CurveMethod::Cce { .. } => "cce",
            CurveMethod::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveMeta {
    pub method: CurveMethod,
    pub bath_id: Option<String>,
    pub bz_gauss: Option<f64>,
    pub cluster_count: usize,
    pub degraded_clusters: usize,
}

impl CurveMeta {
    pub fn cluster() -> Self {
        Self {
            method: CurveMethod::Cluster,
            bath_id: None,
            bz_gauss: None,
            cluster_count: 1,
            degraded_clusters: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCurve {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub meta: CurveMeta,
}

impl SurvivalCurve {
    pub fn max_abs_diff(&self, other: &SurvivalCurve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "# format = {CURVE_FORMAT}");
        let _ = writeln!(s, "# method = {}", m.method.label());
        if let CurveMethod::Cce { order } = m.method {
            let _ = writeln!(s, "# order = {order}");
            let _ = writeln!(s, "# order_with_electron = {}", order + 1);
        }
        let _ = writeln!(s, "# bath_id = {}", m.bath_id.as_deref().unwrap_or("none"));
        match m.bz_gauss {
            Some(b) => {
                let _ = writeln!(s, "# bz_gauss = {b}");
            }
            None => {
                let _ = writeln!(s, "# bz_gauss = none");
            }
        }
        let _ = writeln!(s, "# clusters = {}", m.cluster_count);
        let _ = writeln!(s, "# degraded_clusters = {}", m.degraded_clusters);
        let _ = writeln!(s, "t_us,P");
        for (j, p) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{},{}", self.grid.t(j), p);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parse the `(t_us, P)` rows of a curve file.
    pub fn read_values(path: &Path) -> Result<Vec<(f64, f64)>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.starts_with("t_us") || line.trim().is_empty() {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("bad row {line:?}"),
                })
            };
            let mut it = line.split(',');
            rows.push((parse(it.next())?, parse(it.next())?));
        }
        Ok(rows)
    }
}

/// Eigendecomposition `H = V diag(l) V^dagger`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub vectors: Mat<C64>,
}

impl Spectrum {
    pub fn of(h: &HermitianOperator) -> Result<Self> {
        // clusters are evaluated in parallel one level up; keep each
        // decomposition sequential so results do not depend on thread count
        faer::set_global_parallelism(Par::Seq);
        let evd = h
            .mat()
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let s = evd.S();
        let n = h.dim();
        Ok(Self {
            eigenvalues: (0..n).map(|i| s[i].re).collect(),
            vectors: evd.U().to_owned(),
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `exp(-i H t)`.
    pub fn propagator(&self, t: f64) -> Mat<C64> {
        let n = self.dim();
        let phased = Mat::from_fn(n, n, |i, j| {
            self.vectors[(i, j)] * C64::from_polar(1.0, -self.eigenvalues[j] * t)
        });
        &phased * self.vectors.adjoint()
    }

    /// `U(t) rho U^dagger(t)`.
    pub fn evolve_density(&self, rho: &Mat<C64>, t: f64) -> Mat<C64> {
        let u = self.propagator(t);
        &u * rho * u.adjoint()
    }

    /// Survival probability of the electron `|0>` for the mixed initial state.
    pub fn survival(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let n = self.dim();
        let k = bath_spins_of(n)?;
        let nb = 1usize << k;
        let rows = electron_zero_rows(k);
        let v0 = self.vectors.subrows(rows.start, nb);
        let mut w = Mat::<C64>::zeros(n, n);
        matmul(&mut w, Accum::Replace, v0.adjoint(), v0, C64::new(1.0, 0.0), Par::Seq);
        let q = Mat::<f64>::from_fn(n, n, |i, j| w[(i, j)].norm_sqr());

        // rows 0..T hold cos(l t), rows T..2T hold sin(l t)
        let tn = grid.len();
        let mut phases = Mat::<f64>::zeros(2 * tn, n);
        let dt = grid.dt();
        const RESYNC: usize = 32;
        for (m, &lambda) in self.eigenvalues.iter().enumerate() {
            let (ss, cs) = (lambda * dt).sin_cos();
            let step = C64::new(cs, ss);
            let mut z = C64::new(1.0, 0.0);
            for j in 0..tn {
                if j % RESYNC == 0 {
                    let (s, c) = (lambda * grid.t(j)).sin_cos();
                    z = C64::new(c, s);
                }
                phases[(j, m)] = z.re;
                phases[(tn + j, m)] = z.im;
                z *= step;
            }
        }
        let mut pq = Mat::<f64>::zeros(2 * tn, n);
        matmul(&mut pq, Accum::Replace, &phases, &q, 1.0, Par::Seq);

        let norm = 1.0 / nb as f64;
        let mut out = Vec::with_capacity(tn);
        for j in 0..tn {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..n {
                let (x, y) = (phases[(j, m)], phases[(tn + j, m)]);
                let (qx, qy) = (pq[(j, m)], pq[(tn + j, m)]);
                re += qx * x + qy * y;
                im += qx * y - qy * x;
            }
            let (re, im) = (re * norm, im * norm);
            if im.abs() > IMAGINARY_TOLERANCE {
                return Err(Error::Contract(format!(
                    "survival probability has imaginary residue {im:.3e} at t = {}",
                    grid.t(j)
                )));
            }
            if !(-BOUNDS_TOLERANCE..=1.0 + BOUNDS_TOLERANCE).contains(&re) {
                return Err(Error::Contract(format!(
                    "survival probability {re} outside [0, 1] at t = {}",
                    grid.t(j)
                )));
            }
            out.push(re);
        }
        // U(0) is the identity
        out[0] = 1.0;
        Ok(out)
    }
}

fn bath_spins_of(n: usize) -> Result<usize> {
    if n % 3 == 0 && (n / 3).is_power_of_two() {
        Ok((n / 3).trailing_zeros() as usize)
    } else {
        Err(Error::Contract(format!("dimension {n} is not 3 * 2^k")))
    }
}

/// `|0><0| (x) 1/2^k`.
pub fn initial_cluster_state(k: usize) -> HermitianOperator {
    let nb = 1usize << k;
    let rows = electron_zero_rows(k);
    let w = 1.0 / nb as f64;
    HermitianOperator::from_trusted(Mat::from_fn(3 * nb, 3 * nb, |i, j| {
        if i == j && rows.contains(&i) {
            C64::new(w, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}

/// Survival curve of the electron `|0>` under a cluster Hamiltonian.
pub fn evolve_survival(h: &HermitianOperator, grid: &TimeGrid) -> Result<SurvivalCurve> {
    bath_spins_of(h.dim())?;
    let herm = h.hermiticity_error();
    if herm > HERMITIAN_TOLERANCE {
        return Err(Error::Contract(format!(
            "Hamiltonian is not Hermitian (relative deviation {herm:.3e})"
        )));
    }
    let spectrum = Spectrum::of(h)?;
    Ok(SurvivalCurve {
        grid: *grid,
        values: spectrum.survival(grid)?,
        meta: CurveMeta::cluster(),
    })
}

/// Largest deviation from unity of the bare-NV normalization over the grid.
pub fn denominator_check(bz_gauss: f64, grid: &TimeGrid, constants: &PhysicalConstants) -> Result<f64> {
    denominator_deviation(bz_gauss, &grid.samples(), constants)
}

/// [`denominator_check`] on an arbitrary list of times.
pub fn denominator_deviation(bz_gauss: f64, times: &[f64], constants: &PhysicalConstants) -> Result<f64> {
    let h = nv_hamiltonian(bz_gauss, constants);
    let spectrum = Spectrum::of(&h)?;
    let rho = initial_cluster_state(0);
    let mut worst = 0.0f64;
    for &t in times {
        let rho_t = spectrum.evolve_density(rho.mat(), t);
        worst = worst.max((rho_t[(1, 1)] - C64::new(1.0, 0.0)).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{spins_hamiltonian, CouplingTensor};

    fn consts() -> PhysicalConstants {
        PhysicalConstants::default()
    }

    fn two_spin() -> HermitianOperator {
        spins_hamiltonian(&[[0.61, -0.32, 0.47], [-0.55, 0.71, 0.12]], 1024.97, &consts()).unwrap()
    }

    fn max_dev(a: &Mat<C64>, b: &Mat<C64>) -> f64 {
        let mut d = 0.0f64;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                d = d.max((a[(i, j)] - b[(i, j)]).norm());
            }
        }
        d
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(20.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        let g = TimeGrid::default();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(g.len() - 1), 20.0);
        assert!((g.dt() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn initial_state_structure() {
        let r0 = initial_cluster_state(0);
        assert_eq!(r0.dim(), 3);
        assert_eq!(r0.mat()[(1, 1)], C64::new(1.0, 0.0));
        assert!((r0.trace().re - 1.0).abs() < 1e-15);

        let r2 = initial_cluster_state(2);
        assert_eq!(r2.dim(), 12);
        assert!((r2.trace().re - 1.0).abs() < 1e-15);
        let ev = r2.mat().self_adjoint_eigenvalues(Side::Lower).unwrap();
        let nonzero: Vec<f64> = ev.into_iter().filter(|v| v.abs() > 1e-14).collect();
        assert_eq!(nonzero.len(), 4);
        assert!(nonzero.iter().all(|v| (v - 0.25).abs() < 1e-15));
        // partial trace over the bath
        for e1 in 0..3 {
            for e2 in 0..3 {
                let v: C64 = (0..4).map(|b| r2.mat()[(e1 * 4 + b, e2 * 4 + b)]).sum();
                let want = if e1 == 1 && e2 == 1 { 1.0 } else { 0.0 };
                assert!((v - C64::new(want, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn survival_starts_at_one_and_is_bounded() {
        let curve = evolve_survival(&two_spin(), &TimeGrid::default()).unwrap();
        assert_eq!(curve.values[0], 1.0);
        assert!(curve.values.iter().all(|p| (-1e-10..=1.0 + 1e-10).contains(p)));
        assert!(curve.values.iter().any(|p| *p < 0.999));
    }

    #[test]
    fn decoupled_electron_survives() {
        let k = consts();
        let hf = vec![CouplingTensor::zero(); 2];
        let d = crate::hamiltonian::dipolar_tensor(&[1.0, 0.2, 0.3], k.gamma_c, k.gamma_c, &k).unwrap();
        let h = crate::hamiltonian::assemble(2, 1024.97, &k, &hf, &[((0, 1), d)]);
        let curve = evolve_survival(&h, &TimeGrid::default()).unwrap();
        assert!(curve.values.iter().all(|p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut m = two_spin().into_mat();
        m[(0, 5)] += C64::new(0.3, 0.0);
        assert!(matches!(
            evolve_survival(&HermitianOperator::from_trusted(m.clone()), &TimeGrid::default()),
            Err(Error::Contract(_))
        ));
        assert!(HermitianOperator::new(m).is_err());
        let bad = HermitianOperator::from_trusted(Mat::identity(4, 4));
        assert!(evolve_survival(&bad, &TimeGrid::default()).is_err());
    }

    /// Independent propagation: Taylor-series step of 1 ns composed over the grid.
    fn stepped_survival(h: &HermitianOperator, grid: &TimeGrid) -> Vec<f64> {
        let n = h.dim();
        let k = bath_spins_of(n).unwrap();
        let nb = 1 << k;
        let sub = (grid.dt() / 1e-3).ceil() as usize;
        let tau = grid.dt() / sub as f64;
        // exp(-i H tau) via scaling and squaring of a Taylor polynomial
        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| h.mat()[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut s = 0;
        while norm1 * tau / f64::powi(2.0, s) > 0.5 {
            s += 1;
        }
        let x = Mat::from_fn(n, n, |i, j| h.mat()[(i, j)] * C64::new(0.0, -tau / f64::powi(2.0, s)));
        let mut term = Mat::<C64>::identity(n, n);
        let mut u = Mat::<C64>::identity(n, n);
        for m in 1..25 {
            term = &term * &x * faer::Scale(C64::new(1.0 / m as f64, 0.0));
            u = &u + &term;
        }
        for _ in 0..s {
            u = &u * &u;
        }
        let mut grid_step = Mat::<C64>::identity(n, n);
        for _ in 0..sub {
            grid_step = &grid_step * &u;
        }
        let rows = electron_zero_rows(k);
        let mut psi = Mat::from_fn(n, nb, |i, j| if i == rows.start + j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
        let mut out = Vec::new();
        for _ in 0..grid.len() {
            let p: f64 = rows.clone().flat_map(|i| (0..nb).map(move |j| (i, j))).map(|(i, j)| psi[(i, j)].norm_sqr()).sum();
            out.push(p / nb as f64);
            psi = &grid_step * &psi;
        }
        out
    }

    #[test]
    fn single_spin_matches_stepped_propagator() {
        let h = spins_hamiltonian(&[[0.55, 0.21, -0.38]], 1024.97, &consts()).unwrap();
        let grid = TimeGrid::default();
        let spectral = evolve_survival(&h, &grid).unwrap().values;
        let stepped = stepped_survival(&h, &grid);
        let d = spectral.iter().zip(&stepped).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8, "max deviation {d:.3e}");
    }

    #[test]
    fn propagator_properties() {
        let h = two_spin();
        let spec = Spectrum::of(&h).unwrap();
        let n = h.dim();
        let eye = Mat::<C64>::identity(n, n);
        let rho0 = initial_cluster_state(2);
        let energy = |rho: &Mat<C64>| -> f64 {
            let prod = rho * h.mat();
            (0..n).map(|i| prod[(i, i)].re).sum()
        };
        let e0 = energy(rho0.mat());
        for t in [0.37, 4.1, 13.3, 20.0] {
            let u = spec.propagator(t);
            assert!(max_dev(&(&u * u.adjoint()), &eye) < 1e-10);
            let rho_t = spec.evolve_density(rho0.mat(), t);
            let tr: C64 = (0..n).map(|i| rho_t[(i, i)]).sum();
            assert!((tr - C64::new(1.0, 0.0)).norm() < 1e-10);
            assert!((energy(&rho_t) - e0).abs() < 1e-8 * e0.abs().max(1.0));
            let back = spec.evolve_density(&rho_t, -t);
            assert!(max_dev(&back, rho0.mat()) < 1e-10);
            // survival from the density matrix agrees with the spectral formula
            let p: f64 = electron_zero_rows(2).map(|i| rho_t[(i, i)].re).sum();
            let grid = TimeGrid::new(t, 2).unwrap();
            let fast = spec.survival(&grid).unwrap()[1];
            assert!((p - fast).abs() < 1e-10, "{p} {fast}");
            let imag: f64 = electron_zero_rows(2).map(|i| rho_t[(i, i)].im).sum();
            assert!(imag.abs() < 1e-10);
        }
    }

    #[test]
    fn denominators_are_unity() {
        let k = consts();
        let g = TimeGrid::default();
        for bz in [0.0, 1024.97, 1025.01, 3000.0] {
            assert!(denominator_check(bz, &g, &k).unwrap() < 1e-12);
        }
        assert!(denominator_check(0.0, &g, &k).unwrap() <= 1e-15);
        assert_eq!(denominator_deviation(1024.97, &[0.0], &k).unwrap(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let curve = evolve_survival(&two_spin(), &TimeGrid::new(2.0, 11).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        curve.write_csv(&path).unwrap();
        let rows = SurvivalCurve::read_values(&path).unwrap();
        assert_eq!(rows.len(), 11);
        for (j, (t, p)) in rows.iter().enumerate() {
            assert_eq!(*t, curve.grid.t(j));
            assert_eq!(*p, curve.values[j]);
        }
    }
}
