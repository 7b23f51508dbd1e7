//! Relaxation-time fits, resonance location and field sweeps.

use std::fmt::Write as _;
use std::path::Path;

use crate::cce::{cce_survival, CceSettings};
use crate::dynamics::{SurvivalCurve, TimeGrid};
use crate::error::{Error, Result};
use crate::hamiltonian::{PhysicalConstants, GAUSS_TO_TESLA, PER_SECOND_TO_PER_MICROSECOND};
use crate::lattice::SpinBath;

pub const SWEEP_FORMAT: &str = "nvcce-sweep/1";
/// Curves that never leave `P = 1` by more than this are treated as not decaying.
pub const NO_DECAY_THRESHOLD: f64 = 1e-9;
/// Fitted decay amplitudes below this are not resolvable relaxation; the
/// rate is then reported as zero.
pub const AMPLITUDE_FLOOR: f64 = 1e-3;
/// RMS residual above which a fit is flagged as not converged.
pub const RESIDUAL_THRESHOLD: f64 = 0.05;
/// Default bracket for the resonance search, in gauss.
pub const RESONANCE_BRACKET_GAUSS: (f64, f64) = (0.0, 2000.0);

const MAX_ITERATIONS: usize = 500;

/// Fit of `P(t) = P_inf + (1 - P_inf) exp(-t / T1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1Fit {
    /// Relaxation time in us; infinite when the curve does not decay.
    pub t1: f64,
    pub baseline: f64,
    /// `1 - baseline`.
    pub amplitude: f64,
    pub rms_residual: f64,
    pub converged: bool,
}

impl T1Fit {
    /// Relaxation rate in 1/us, zero for a non-decaying curve.
    pub fn inv_t1(&self) -> f64 {
        if self.t1.is_finite() {
            1.0 / self.t1
        } else {
            0.0
        }
    }

    /// Model value at time `t`.
    pub fn model(&self, t: f64) -> f64 {
        self.baseline + self.amplitude * (-t * self.inv_t1()).exp()
    }
}

fn model_terms(b: f64, k: f64, t: f64) -> (f64, f64, f64) {
    let e = (-k * t).exp();
    (b + (1.0 - b) * e, 1.0 - e, -(1.0 - b) * t * e)
}

fn cost(times: &[f64], values: &[f64], b: f64, k: f64) -> f64 {
    times
        .iter()
        .zip(values)
        .map(|(&t, &p)| {
            let r = model_terms(b, k, t).0 - p;
            r * r
        })
        .sum()
}

/// Least-squares relaxation fit to arbitrary samples `(t, P)`.
pub fn fit_t1_samples(times: &[f64], values: &[f64]) -> Result<T1Fit> {
    if times.len() != values.len() {
        return Err(Error::Argument(format!(
            "{} times but {} values",
            times.len(),
            values.len()
        )));
    }
    if times.len() < 10 {
        return Err(Error::Argument(format!("fit needs at least 10 points, got {}", times.len())));
    }
    if !(0.9..=1.1).contains(&values[0]) {
        return Err(Error::Argument(format!("P(0) = {} outside [0.9, 1.1]", values[0])));
    }
    if values.iter().any(|v| !v.is_finite()) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Argument("non-finite sample".into()));
    }
    let n = times.len();
    let deviation = values.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    if deviation < NO_DECAY_THRESHOLD {
        let rms = (values.iter().map(|p| (p - 1.0).powi(2)).sum::<f64>() / n as f64).sqrt();
        return Ok(T1Fit {
            t1: f64::INFINITY,
            baseline: 1.0,
            amplitude: 0.0,
            rms_residual: rms,
            converged: true,
        });
    }

    let t_first = times[0];
    let t_last = times[n - 1];
    let mut b = values[n - 1];
    let target = b + (1.0 - b) / std::f64::consts::E;
    let crossing = times
        .iter()
        .zip(values)
        .find(|(_, &p)| if b < 1.0 { p <= target } else { p >= target })
        .map(|(&t, _)| t)
        .filter(|&t| t > t_first);
    let t0 = crossing.unwrap_or(0.5 * (t_first + t_last)).max(f64::MIN_POSITIVE);
    let mut k = 1.0 / t0;

    let mut c = cost(times, values, b, k);
    let mut lambda = 1e-3;
    let mut finished = false;
    for _ in 0..MAX_ITERATIONS {
        let (mut jbb, mut jbk, mut jkk, mut gb, mut gk) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &p) in times.iter().zip(values) {
            let (f, db, dk) = model_terms(b, k, t);
            let r = f - p;
            jbb += db * db;
            jbk += db * dk;
            jkk += dk * dk;
            gb += db * r;
            gk += dk * r;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let (a11, a22) = (jbb * (1.0 + lambda), jkk * (1.0 + lambda));
            let det = a11 * a22 - jbk * jbk;
            if det > 0.0 && det.is_finite() {
                let db = -(a22 * gb - jbk * gk) / det;
                let dk = -(a11 * gk - jbk * gb) / det;
                let (nb, nk) = (b + db, k + dk);
                if nk > 0.0 && nk.is_finite() && nb.is_finite() {
                    let nc = cost(times, values, nb, nk);
                    if nc <= c {
                        let small = db.abs() <= 1e-14 * (1.0 + b.abs()) && dk.abs() <= 1e-14 * k;
                        b = nb;
                        k = nk;
                        let stalled = c - nc <= 1e-30 + 1e-16 * c;
                        c = nc;
                        lambda = (lambda * 0.3).max(1e-12);
                        accepted = true;
                        if small || stalled {
                            finished = true;
                        }
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            finished = true;
        }
        if finished {
            break;
        }
    }

    let rms = (c / n as f64).sqrt();
    if (1.0 - b).abs() < AMPLITUDE_FLOOR {
        return Ok(T1Fit {
            t1: f64::INFINITY,
            baseline: b,
            amplitude: 1.0 - b,
            rms_residual: rms,
            converged: finished && rms <= RESIDUAL_THRESHOLD,
        });
    }
    // a decay faster than the first sample interval is not resolved
    let resolved = 1.0 / k >= times[1] - times[0];
    Ok(T1Fit {
        t1: 1.0 / k,
        baseline: b,
        amplitude: 1.0 - b,
        rms_residual: rms,
        converged: finished && resolved && rms <= RESIDUAL_THRESHOLD,
    })
}

/// Relaxation fit of a survival curve.
pub fn fit_t1(curve: &SurvivalCurve) -> Result<T1Fit> {
    fit_t1_samples(&curve.grid.samples(), &curve.values)
}

/// Fields in `(lo, hi)` where the `|0> <-> |-1>` gap equals the nuclear
/// Zeeman splitting, `|D + gamma_e Bz| = gamma_c Bz`, in ascending order.
pub fn resonance_field(constants: &PhysicalConstants) -> Result<Vec<f64>> {
    resonance_field_in(constants, RESONANCE_BRACKET_GAUSS.0, RESONANCE_BRACKET_GAUSS.1)
}

/// [`resonance_field`] over an explicit bracket.
pub fn resonance_field_in(constants: &PhysicalConstants, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(constants.zero_field_splitting > 0.0 && constants.gamma_e < 0.0 && constants.gamma_c >= 0.0) {
        return Err(Error::Config(
            "resonance search needs D > 0, gamma_e < 0 and gamma_c >= 0".into(),
        ));
    }
    if !(lo < hi) {
        return Err(Error::Argument(format!("empty bracket ({lo}, {hi})")));
    }
    let d = constants.zero_field_splitting;
    let ge = constants.gamma_e * GAUSS_TO_TESLA;
    let gc = constants.gamma_c * GAUSS_TO_TESLA;
    let mut roots = Vec::new();
    // the two sign branches of the absolute value
    for sign in [1.0, -1.0] {
        let g = |bz: f64| (d + ge * bz) - sign * gc * bz;
        if let Some(r) = bisect(g, lo, hi) {
            if r > lo && r < hi && !roots.iter().any(|&x: &f64| x == r) {
                roots.push(r);
            }
        }
    }
    if roots.is_empty() {
        return Err(Error::Search(format!("no resonance in ({lo}, {hi}) G")));
    }
    roots.sort_by(f64::total_cmp);
    Ok(roots)
}

/// Root nearest to `near_gauss`.
pub fn nearest_resonance(constants: &PhysicalConstants, near_gauss: f64) -> Result<f64> {
    let roots = resonance_field(constants)?;
    Ok(roots
        .into_iter()
        .min_by(|a, b| (a - near_gauss).abs().total_cmp(&(b - near_gauss).abs()))
        .expect("nonempty"))
}

fn bisect(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    let (mut fa, fb) = (f(a), f(b));
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// `|0> <-> |-1>` gap minus the nuclear Zeeman splitting, in rad/us.
pub fn resonance_detuning(constants: &PhysicalConstants, bz_gauss: f64) -> f64 {
    let gap = (constants.zero_field_splitting + constants.gamma_e * bz_gauss * GAUSS_TO_TESLA).abs();
    (gap - constants.gamma_c * bz_gauss * GAUSS_TO_TESLA) * PER_SECOND_TO_PER_MICROSECOND
}

/// One sweep point; a failed simulation or fit keeps its message.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bz_gauss: f64,
    pub fit: std::result::Result<T1Fit, String>,
}

/// `cce_survival` and `fit_t1` at every field, in input order.
pub fn field_sweep(
    bath: &SpinBath,
    order: usize,
    fields: &[f64],
    grid: &TimeGrid,
    base: &CceSettings,
) -> Result<Vec<SweepRow>> {
    if fields.is_empty() {
        return Err(Error::Argument("field sweep needs at least one field".into()));
    }
    if order == 0 {
        return Err(Error::Argument("cluster order must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(fields.len());
    for &bz in fields {
        let settings = CceSettings {
            bz_gauss: bz,
            grid: *grid,
            ..base.clone()
        };
        let fit = cce_survival(bath, order, &settings).and_then(|c| fit_t1(&c));
        if let Err(e) = &fit {
            log::warn!("sweep point {bz} G failed: {e}");
        }
        rows.push(SweepRow {
            bz_gauss: bz,
            fit: fit.map_err(|e| e.to_string()),
        });
    }
    Ok(rows)
}

/// Sweep table as CSV: `Bz_gauss,t1_us,inv_t1_per_us,baseline,residual,converged`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# format = {SWEEP_FORMAT}");
    let _ = writeln!(s, "Bz_gauss,t1_us,inv_t1_per_us,baseline,residual,converged");
    for r in rows {
        match &r.fit {
            Ok(f) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.bz_gauss,
                    f.t1,
                    f.inv_t1(),
                    f.baseline,
                    f.rms_residual,
                    f.converged
                );
            }
            Err(_) => {
                let _ = writeln!(s, "{},NaN,NaN,NaN,NaN,false", r.bz_gauss);
            }
        }
    }
    s
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, sweep_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Peak-to-trough range of a curve.
pub fn oscillation_amplitude(curve: &SurvivalCurve) -> f64 {
    let max = curve.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = curve.values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}
