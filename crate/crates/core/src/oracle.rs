//! Brute-force ground truth for small baths.
//!
//! The full electron plus bath Hamiltonian is built once and each of the
//! `2^N` bath basis states is propagated with the electron in `|0>`. Averaging
//! their survival probabilities equals the trace over the maximally mixed bath.
//! Propagation is self-contained here: a cyclic complex Jacobi eigensolver
//! drives the default spectral path, and a Taylor-series step propagator is
//! available as an alternative.

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::dynamics::{CurveMeta, CurveMethod, SurvivalCurve, TimeGrid};
use crate::error::{Error, Result};
use crate::hamiltonian::{full_hamiltonian, PhysicalConstants};
use crate::lattice::SpinBath;

pub const DEFAULT_CAP: usize = 12;
/// Largest substep of the stepped propagator, in us.
pub const DEFAULT_MAX_STEP_US: f64 = 1e-3;

const JACOBI_MAX_SWEEPS: usize = 60;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMethod {
    /// Jacobi diagonalization of the full Hamiltonian.
    Spectral,
    /// Repeated application of `exp(-i H h)` with `h <= max_step_us`.
    TimeStepped { max_step_us: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub cap: usize,
    pub method: OracleMethod,
    pub constants: PhysicalConstants,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            method: OracleMethod::Spectral,
            constants: PhysicalConstants::default(),
        }
    }
}

/// Dense row-major complex square matrix.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    n: usize,
    a: Vec<C64>,
}

impl Dense {
    fn zeros(n: usize) -> Self {
        Self { n, a: vec![ZERO; n * n] }
    }

    fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = ONE;
        }
        m
    }

    fn at(&self, i: usize, j: usize) -> C64 {
        self.a[i * self.n + j]
    }

    fn mul(&self, other: &Dense) -> Dense {
        let n = self.n;
        let mut out = Dense::zeros(n);
        for i in 0..n {
            let row = &mut out.a[i * n..(i + 1) * n];
            for k in 0..n {
                let x = self.a[i * n + k];
                if x == ZERO {
                    continue;
                }
                let other_row = &other.a[k * n..(k + 1) * n];
                for (r, &y) in row.iter_mut().zip(other_row) {
                    *r += x * y;
                }
            }
        }
        out
    }

    fn mul_vec(&self, v: &[C64]) -> Vec<C64> {
        let n = self.n;
        (0..n)
            .map(|i| self.a[i * n..(i + 1) * n].iter().zip(v).map(|(x, y)| x * y).sum())
            .collect()
    }

    fn one_norm(&self) -> f64 {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.at(i, j).norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues and row-major eigenvector matrix (columns are eigenvectors).
fn jacobi_eigen(h: &Dense) -> Result<(Vec<f64>, Dense)> {
    let n = h.n;
    let mut a = h.clone();
    let mut v = Dense::identity(n);
    let scale = a.a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.at(i, j).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            let vals = (0..n).map(|i| a.at(i, i).re).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let b = a.at(p, q);
                let mag = b.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let phase = b / mag;
                let (app, aqq) = (a.at(p, p).re, a.at(q, q).re);
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // U restricted to (p, q): [[c, s], [-s e^{-i phi}, c e^{-i phi}]]
                let upp = C64::new(c, 0.0);
                let upq = C64::new(s, 0.0);
                let uqp = -phase.conj() * s;
                let uqq = phase.conj() * c;
                for i in 0..n {
                    let (x, y) = (a.a[i * n + p], a.a[i * n + q]);
                    a.a[i * n + p] = x * upp + y * uqp;
                    a.a[i * n + q] = x * upq + y * uqq;
                    let (x, y) = (v.a[i * n + p], v.a[i * n + q]);
                    v.a[i * n + p] = x * upp + y * uqp;
                    v.a[i * n + q] = x * upq + y * uqq;
                }
                for j in 0..n {
                    let (x, y) = (a.a[p * n + j], a.a[q * n + j]);
                    a.a[p * n + j] = upp.conj() * x + uqp.conj() * y;
                    a.a[q * n + j] = upq.conj() * x + uqq.conj() * y;
                }
                a.a[p * n + q] = ZERO;
                a.a[q * n + p] = ZERO;
                a.a[p * n + p] = C64::new(a.a[p * n + p].re, 0.0);
                a.a[q * n + q] = C64::new(a.a[q * n + q].re, 0.0);
            }
        }
    }
    Err(Error::Eigen(format!("Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps (dimension {n})")))
}

/// `exp(-i H dt)` by Taylor series on `2^-s`-scaled steps no longer than
/// `max_step`, followed by repeated squaring and a remainder product.
fn step_propagator(h: &Dense, dt: f64, max_step: f64) -> Dense {
    let n = h.n;
    let steps = (dt / max_step).ceil().max(1.0) as usize;
    let sub = dt / steps as f64;
    // further halve the substep until the series argument is small
    let mut squarings = 0u32;
    let mut tiny = sub;
    while h.one_norm() * tiny > 0.5 {
        tiny *= 0.5;
        squarings += 1;
    }
    let mut gen = h.clone();
    gen.a.iter_mut().for_each(|x| *x *= C64::new(0.0, -tiny));
    let mut u = Dense::identity(n);
    let mut term = Dense::identity(n);
    for k in 1..=30 {
        term = term.mul(&gen);
        let f = 1.0 / k as f64;
        term.a.iter_mut().for_each(|x| *x *= f);
        let size = term.one_norm();
        u.a.iter_mut().zip(&term.a).for_each(|(x, y)| *x += y);
        if size < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        u = u.mul(&u);
    }
    let mut total = Dense::identity(n);
    let mut base = u;
    let mut e = steps;
    while e > 0 {
        if e & 1 == 1 {
            total = total.mul(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.mul(&base);
        }
    }
    total
}

fn to_dense(bath: &SpinBath, bz_gauss: f64, constants: &PhysicalConstants) -> Result<Dense> {
    let h = full_hamiltonian(bath, bz_gauss, constants)?;
    let m = h.mat();
    let n = h.dim();
    let mut d = Dense::zeros(n);
    for i in 0..n {
        for j in 0..n {
            d.a[i * n + j] = m[(i, j)];
        }
    }
    Ok(d)
}

/// Survival of one bath basis state `|0, b>` from the spectral data.
fn spectral_state_survival(vals: &[f64], v: &Dense, nb: usize, b: usize, grid: &TimeGrid) -> Vec<f64> {
    let n = v.n;
    let rows: Vec<&[C64]> = (0..nb).map(|r| &v.a[(nb + r) * n..(nb + r + 1) * n]).collect();
    let start = rows[b];
    (0..grid.len())
        .map(|j| {
            let t = grid.t(j);
            let coef: Vec<C64> = (0..n)
                .map(|m| C64::from_polar(1.0, -vals[m] * t) * start[m].conj())
                .collect();
            rows.iter()
                .map(|row| row.iter().zip(&coef).map(|(x, y)| x * y).sum::<C64>().norm_sqr())
                .sum()
        })
        .collect()
}

fn stepped_state_survival(u_dt: &Dense, nb: usize, b: usize, grid: &TimeGrid) -> Vec<f64> {
    let mut psi = vec![ZERO; u_dt.n];
    psi[nb + b] = ONE;
    let mut out = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        if j > 0 {
            psi = u_dt.mul_vec(&psi);
        }
        out.push(psi[nb..2 * nb].iter().map(|x| x.norm_sqr()).sum());
    }
    out
}

/// Exact `|0>` survival of the full NV plus bath system.
pub fn exact_survival(bath: &SpinBath, bz_gauss: f64, grid: &TimeGrid, opts: &OracleOptions) -> Result<SurvivalCurve> {
    let n_spins = bath.len();
    if n_spins > opts.cap {
        return Err(Error::Capacity {
            what: "oracle bath size",
            requested: n_spins,
            cap: opts.cap,
        });
    }
    opts.constants.validate()?;
    let meta = CurveMeta {
        method: CurveMethod::Exact,
        bath_id: Some(bath.id()),
        bz_gauss: Some(bz_gauss),
        cluster_count: 1,
        degraded_clusters: 0,
    };
    if n_spins == 0 {
        return Ok(SurvivalCurve {
            grid: *grid,
            values: vec![1.0; grid.len()],
            meta,
        });
    }
    let h = to_dense(bath, bz_gauss, &opts.constants)?;
    let nb = 1usize << n_spins;
    let per_state: Vec<Vec<f64>> = match opts.method {
        OracleMethod::Spectral => {
            let (vals, v) = jacobi_eigen(&h)?;
            (0..nb)
                .into_par_iter()
                .map(|b| spectral_state_survival(&vals, &v, nb, b, grid))
                .collect()
        }
        OracleMethod::TimeStepped { max_step_us } => {
            if !(max_step_us > 0.0) {
                return Err(Error::Argument(format!("oracle step must be positive, got {max_step_us}")));
            }
            let u_dt = step_propagator(&h, grid.dt(), max_step_us);
            (0..nb)
                .into_par_iter()
                .map(|b| stepped_state_survival(&u_dt, nb, b, grid))
                .collect()
        }
    };
    let norm = 1.0 / nb as f64;
    let mut values = vec![0.0; grid.len()];
    for curve in &per_state {
        values.iter_mut().zip(curve).for_each(|(a, p)| *a += p);
    }
    values.iter_mut().for_each(|v| *v *= norm);
    values[0] = 1.0;
    Ok(SurvivalCurve {
        grid: *grid,
        values,
        meta,
    })
}
