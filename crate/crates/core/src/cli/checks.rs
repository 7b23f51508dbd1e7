//! Self-checks shared by the `validate` command and the acceptance suite.

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::cce::{CceEngine, CceSettings};
use crate::dynamics::{denominator_check, evolve_survival, initial_cluster_state, Spectrum, TimeGrid};
use crate::error::Result;
use crate::hamiltonian::{
    assemble, cluster_hamiltonian, dipolar_tensor, electron_zero_rows, CouplingTensor, PhysicalConstants,
};
use crate::lattice::{sample_bath, LatticeConfig, SpinBath};
use crate::oracle::{exact_survival, OracleOptions};

/// Fields either side of the resonance used by the equivalence checks.
pub const CHECK_FIELDS_GAUSS: [f64; 2] = [1024.97, 1025.01];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// The `count` nearest spins of a default-abundance bath.
pub fn small_bath(seed: u64, count: usize) -> Result<SpinBath> {
    sample_bath(&LatticeConfig {
        seed,
        max_spins: Some(count),
        ..LatticeConfig::default()
    })
}

/// Largest deviations found by [`oracle_equivalence`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquivalenceStats {
    pub runs: usize,
    pub clusters: usize,
    pub max_oracle_error: f64,
    pub max_reconstruction_error: f64,
}

/// Full-order expansion against the exact oracle, and the reconstruction
/// identity for every cluster evaluated on the way.
pub fn oracle_equivalence(baths: &[SpinBath], fields: &[f64], grid: &TimeGrid) -> Result<EquivalenceStats> {
    let mut stats = EquivalenceStats::default();
    let constants = PhysicalConstants::default();
    for bath in baths {
        for &bz in fields {
            let exact = exact_survival(bath, bz, grid, &OracleOptions::default())?;
            let mut engine = CceEngine::new(bath, CceSettings::new(bz, *grid))?;
            let cce = engine.survival(bath.len().max(1))?;
            stats.max_oracle_error = stats.max_oracle_error.max(exact.max_abs_diff(&cce));
            for (cluster, _) in engine.table().entries() {
                let h = cluster_hamiltonian(bath, cluster, bz, &constants)?;
                let direct = evolve_survival(&h, grid)?.values;
                let rebuilt = engine.table().reconstruct(cluster)?;
                let err = direct.iter().zip(&rebuilt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                stats.max_reconstruction_error = stats.max_reconstruction_error.max(err);
                stats.clusters += 1;
            }
            stats.runs += 1;
        }
    }
    Ok(stats)
}

/// Largest normalization deviation over `fields`.
pub fn denominator_unity(fields: &[f64], grid: &TimeGrid) -> Result<f64> {
    let constants = PhysicalConstants::default();
    let mut worst = 0.0f64;
    for &bz in fields {
        worst = worst.max(denominator_check(bz, grid, &constants)?);
    }
    Ok(worst)
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

/// Worst violations of the propagation contracts on one cluster Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContractStats {
    pub hermiticity: f64,
    pub unitarity: f64,
    pub trace: f64,
    pub imaginary: f64,
    pub time_reversal: f64,
    pub decoupled: f64,
}

impl ContractStats {
    fn merge(&mut self, o: &ContractStats) {
        self.hermiticity = self.hermiticity.max(o.hermiticity);
        self.unitarity = self.unitarity.max(o.unitarity);
        self.trace = self.trace.max(o.trace);
        self.imaginary = self.imaginary.max(o.imaginary);
        self.time_reversal = self.time_reversal.max(o.time_reversal);
        self.decoupled = self.decoupled.max(o.decoupled);
    }
}

/// Contract deviations over the clusters `{0..k}` of `bath` for `k` up to
/// `max_spins`, at the given sample times.
pub fn numerical_contracts(bath: &SpinBath, bz_gauss: f64, max_spins: usize, times: &[f64]) -> Result<ContractStats> {
    let constants = PhysicalConstants::default();
    let mut stats = ContractStats::default();
    for k in 1..=max_spins.min(bath.len()) {
        let cluster = crate::cce::Cluster::new((0..k).collect())?;
        let h = cluster_hamiltonian(bath, &cluster, bz_gauss, &constants)?;
        let n = h.dim();
        let spec = Spectrum::of(&h)?;
        let rho0 = initial_cluster_state(k);
        let eye = Mat::<C64>::identity(n, n);
        let mut s = ContractStats {
            hermiticity: h.hermiticity_error(),
            ..ContractStats::default()
        };
        for &t in times {
            let u = spec.propagator(t);
            s.unitarity = s.unitarity.max(max_dev(&(u.adjoint() * &u), &eye));
            let rho_t = spec.evolve_density(rho0.mat(), t);
            let tr: C64 = (0..n).map(|i| rho_t[(i, i)]).sum();
            s.trace = s.trace.max((tr - C64::new(1.0, 0.0)).norm());
            let p: C64 = electron_zero_rows(k).map(|i| rho_t[(i, i)]).sum();
            s.imaginary = s.imaginary.max(p.im.abs());
            let back = spec.evolve_density(&rho_t, -t);
            s.time_reversal = s.time_reversal.max(max_dev(&back, rho0.mat()));
        }

        // same nuclear couplings with every hyperfine tensor switched off
        let positions: Vec<_> = (0..k).map(|i| bath.positions[i]).collect();
        let mut dipolar = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                let r = crate::lattice::sub(&positions[b], &positions[a]);
                dipolar.push(((a, b), dipolar_tensor(&r, constants.gamma_c, constants.gamma_c, &constants)?));
            }
        }
        let free = assemble(k, bz_gauss, &constants, &vec![CouplingTensor::zero(); k], &dipolar);
        let grid = TimeGrid::new(times.iter().copied().fold(1.0, f64::max), 101)?;
        let curve = evolve_survival(&free, &grid)?;
        s.decoupled = curve.values.iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
        stats.merge(&s);
    }
    Ok(stats)
}

/// Contract tolerances.
pub const HERMITICITY_TOL: f64 = 1e-12;
pub const UNITARITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const IMAGINARY_TOL: f64 = 1e-10;
pub const TIME_REVERSAL_TOL: f64 = 1e-10;
pub const DECOUPLED_TOL: f64 = 1e-12;

pub fn contract_outcomes(stats: &ContractStats) -> Vec<CheckOutcome> {
    let row = |name: &str, v: f64, tol: f64| CheckOutcome::new(name, v < tol, format!("max deviation {v:.3e} (tolerance {tol:.0e})"));
    vec![
        row("hermiticity", stats.hermiticity, HERMITICITY_TOL),
        row("unitarity", stats.unitarity, UNITARITY_TOL),
        row("trace preservation", stats.trace, TRACE_TOL),
        row("reality of P", stats.imaginary, IMAGINARY_TOL),
        row("time reversal", stats.time_reversal, TIME_REVERSAL_TOL),
        row("decoupled-bath neutrality", stats.decoupled, DECOUPLED_TOL),
    ]
}

/// The suite run by `nvcce validate`.
pub fn validation_suite(grid: &TimeGrid) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let baths: Vec<SpinBath> = (2..=4)
        .map(|n| small_bath(100 + n as u64, n))
        .collect::<Result<_>>()?;
    let eq = oracle_equivalence(&baths, &CHECK_FIELDS_GAUSS, grid)?;
    out.push(CheckOutcome::new(
        "oracle equivalence",
        eq.max_oracle_error < 1e-10,
        format!("{} runs, max |P_cce - P_exact| = {:.3e}", eq.runs, eq.max_oracle_error),
    ));
    out.push(CheckOutcome::new(
        "reconstruction identity",
        eq.max_reconstruction_error < 1e-12,
        format!("{} clusters, max error {:.3e}", eq.clusters, eq.max_reconstruction_error),
    ));
    let fields: Vec<f64> = (0..10).map(|i| 1024.95 + 0.01 * i as f64).collect();
    let den = denominator_unity(&fields, grid)?;
    out.push(CheckOutcome::new(
        "denominator unity",
        den < 1e-12,
        format!("{} fields, max deviation {den:.3e}", fields.len()),
    ));
    let mut stats = ContractStats::default();
    for (i, bath) in baths.iter().enumerate() {
        let s = numerical_contracts(bath, CHECK_FIELDS_GAUSS[i % 2], bath.len(), &[0.37, 4.1, 13.3, 20.0])?;
        stats.merge(&s);
    }
    out.extend(contract_outcomes(&stats));
    Ok(out)
}
