//! Spin operators, dipolar coupling tensors and cluster Hamiltonians.
//!
//! Internal units: energies in rad/us, times in us, lengths in nm. The field
//! enters the public API in gauss. Basis ordering is electron
//! `(|+1>, |0>, |-1>)` tensored with one `(|up>, |down>)` factor per bath
//! spin, bath spins in the order supplied (ascending index for clusters).

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::cce::Cluster;
use crate::error::{Error, Result};
use crate::lattice::{norm, sub, SpinBath, Vec3};

pub const GAUSS_TO_TESLA: f64 = 1e-4;
/// Conversion from rad/s to the internal rad/us.
pub const PER_SECOND_TO_PER_MICROSECOND: f64 = 1e-6;
const NM_TO_M: f64 = 1e-9;

/// Electron-spin row block holding `|0>` in a cluster space of `k` bath spins.
pub fn electron_zero_rows(k: usize) -> std::ops::Range<usize> {
    let nb = 1usize << k;
    nb..2 * nb
}

/// Physical constants in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    /// Zero-field splitting as an angular frequency (rad/s).
    pub zero_field_splitting: f64,
    /// Electron gyromagnetic ratio (rad s^-1 T^-1), negative.
    pub gamma_e: f64,
    /// 13C gyromagnetic ratio (rad s^-1 T^-1).
    pub gamma_c: f64,
    /// Vacuum permeability (T m / A).
    pub mu0: f64,
    /// Reduced Planck constant (J s).
    pub hbar: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            zero_field_splitting: 2.0 * std::f64::consts::PI * 2.87e9,
            gamma_e: -1.76e11,
            gamma_c: 6.73e7,
            mu0: 4.0 * std::f64::consts::PI * 1e-7,
            hbar: 1.054571817e-34,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.zero_field_splitting > 0.0) {
            return Err(Error::Config("zero-field splitting must be positive".into()));
        }
        if !(self.gamma_e < 0.0) {
            return Err(Error::Config("electron gyromagnetic ratio must be negative".into()));
        }
        if !(self.gamma_c > 0.0) {
            return Err(Error::Config("13C gyromagnetic ratio must be positive".into()));
        }
        if !(self.mu0 > 0.0 && self.hbar > 0.0) {
            return Err(Error::Config("mu0 and hbar must be positive".into()));
        }
        Ok(())
    }

    /// Zero-field splitting in rad/us.
    pub fn d_internal(&self) -> f64 {
        self.zero_field_splitting * PER_SECOND_TO_PER_MICROSECOND
    }

    /// Electron Zeeman coefficient `gamma_e * Bz` in rad/us.
    pub fn electron_zeeman(&self, bz_gauss: f64) -> f64 {
        self.gamma_e * bz_gauss * GAUSS_TO_TESLA * PER_SECOND_TO_PER_MICROSECOND
    }

    /// Nuclear Zeeman coefficient `gamma_c * Bz` in rad/us.
    pub fn nuclear_zeeman(&self, bz_gauss: f64) -> f64 {
        self.gamma_c * bz_gauss * GAUSS_TO_TESLA * PER_SECOND_TO_PER_MICROSECOND
    }

    /// Human-readable listing used by `show-constants`.
    pub fn describe(&self) -> String {
        format!(
            "zero_field_splitting_rad_per_s = {}\n\
             zero_field_splitting_hz = {}\n\
             gamma_e_rad_per_s_per_t = {}\n\
             gamma_c_rad_per_s_per_t = {}\n\
             mu0_t_m_per_a = {}\n\
             hbar_j_s = {}\n",
            self.zero_field_splitting,
            self.zero_field_splitting / (2.0 * std::f64::consts::PI),
            self.gamma_e,
            self.gamma_c,
            self.mu0,
            self.hbar
        )
    }
}

/// Symmetric traceless 3x3 coupling tensor in rad/us.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingTensor(pub [[f64; 3]; 3]);

impl CouplingTensor {
    pub fn zero() -> Self {
        Self([[0.0; 3]; 3])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..3).all(|i| (0..3).all(|j| self.0[i][j] == self.0[j][i]))
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.0;
        m.iter_mut().flatten().for_each(|v| *v *= s);
        Self(m)
    }
}

/// Point-dipole tensor `(mu0 ga gb hbar / 4 pi r^3)(1 - 3 r r^T / r^2)`.
pub fn dipolar_tensor(
    r_nm: &Vec3,
    gamma_a: f64,
    gamma_b: f64,
    constants: &PhysicalConstants,
) -> Result<CouplingTensor> {
    let r = norm(r_nm);
    if !(r > 0.0) {
        return Err(Error::Singular("dipolar coupling at zero separation".into()));
    }
    let r_m = r * NM_TO_M;
    let prefactor = constants.mu0 / (4.0 * std::f64::consts::PI) * gamma_a * gamma_b * constants.hbar
        / (r_m * r_m * r_m)
        * PER_SECOND_TO_PER_MICROSECOND;
    let u = [r_nm[0] / r, r_nm[1] / r, r_nm[2] / r];
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            *v = prefactor * (delta - 3.0 * u[i] * u[j]);
        }
    }
    Ok(CouplingTensor(m))
}

/// Electron-nucleus hyperfine tensor for a 13C at `r_nm` from the NV.
pub fn hyperfine_tensor(r_nm: &Vec3, constants: &PhysicalConstants) -> Result<CouplingTensor> {
    dipolar_tensor(r_nm, constants.gamma_c, constants.gamma_e, constants)
}

/// Dense complex Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    mat: Mat<C64>,
}

impl HermitianOperator {
    /// Wrap a matrix, checking Hermiticity to `1e-12` relative.
    pub fn new(mat: Mat<C64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Contract(format!(
                "operator is {}x{}, not square",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let op = Self { mat };
        let err = op.hermiticity_error();
        if err > 1e-12 {
            return Err(Error::Contract(format!(
                "operator is not Hermitian (relative deviation {err:.3e})"
            )));
        }
        Ok(op)
    }

    pub(crate) fn from_trusted(mat: Mat<C64>) -> Self {
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mat(&self) -> &Mat<C64> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<C64> {
        self.mat
    }

    /// Number of bath spins `k` for a `3 * 2^k` dimensional cluster space.
    pub fn bath_spins(&self) -> Option<usize> {
        let n = self.dim();
        if n % 3 != 0 {
            return None;
        }
        let nb = n / 3;
        nb.is_power_of_two().then(|| nb.trailing_zeros() as usize)
    }

    /// `max |A - A^dagger| / max |A|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut scale = 0.0f64;
        let mut dev = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let a = self.mat[(i, j)];
                scale = scale.max(a.norm());
                dev = dev.max((a - self.mat[(j, i)].conj()).norm());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            dev / scale
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.mat[(i, i)]).sum()
    }
}

/// Spin-1 electron and spin-1/2 nuclear operators.
#[derive(Debug, Clone)]
pub struct SpinOperators {
    /// `S_x, S_y, S_z` in `(|+1>, |0>, |-1>)`.
    pub s: [[[C64; 3]; 3]; 3],
    /// `I_x, I_y, I_z` in `(|up>, |down>)`.
    pub i: [[[C64; 2]; 2]; 3],
}

impl SpinOperators {
    pub fn new() -> Self {
        let z = C64::new(0.0, 0.0);
        let r = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let ri = C64::new(0.0, std::f64::consts::FRAC_1_SQRT_2);
        let one = C64::new(1.0, 0.0);
        let h = C64::new(0.5, 0.0);
        let hi = C64::new(0.0, 0.5);
        Self {
            s: [
                [[z, r, z], [r, z, r], [z, r, z]],
                [[z, -ri, z], [ri, z, -ri], [z, ri, z]],
                [[one, z, z], [z, z, z], [z, z, -one]],
            ],
            i: [[[z, h], [h, z]], [[z, -hi], [hi, z]], [[h, z], [z, -h]]],
        }
    }
}

impl Default for SpinOperators {
    fn default() -> Self {
        Self::new()
    }
}

/// `H_NV = D S_z^2 - gamma_e Bz S_z`, diagonal in `(|+1>, |0>, |-1>)`.
pub fn nv_hamiltonian(bz_gauss: f64, constants: &PhysicalConstants) -> HermitianOperator {
    let d = constants.d_internal();
    let ze = constants.electron_zeeman(bz_gauss);
    let diag = nv_levels(d, ze);
    HermitianOperator::from_trusted(Mat::from_fn(3, 3, |i, j| {
        if i == j {
            C64::new(diag[i], 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    }))
}

fn nv_levels(d: f64, electron_zeeman: f64) -> [f64; 3] {
    [d - electron_zeeman, 0.0, d + electron_zeeman]
}

/// 6x6 matrix of `S . A . I` on (electron, nucleus), index `2 e + s`.
fn hyperfine_block(a: &CouplingTensor, ops: &SpinOperators) -> [[C64; 6]; 6] {
    let mut out = [[C64::new(0.0, 0.0); 6]; 6];
    for p in 0..3 {
        for q in 0..3 {
            let c = a.0[p][q];
            if c == 0.0 {
                continue;
            }
            for e1 in 0..3 {
                for e2 in 0..3 {
                    let sv = ops.s[p][e1][e2];
                    if sv == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for s1 in 0..2 {
                        for s2 in 0..2 {
                            out[2 * e1 + s1][2 * e2 + s2] += sv * ops.i[q][s1][s2] * c;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 4x4 matrix of `I_a . D . I_b`, index `2 s_a + s_b`.
fn dipolar_block(d: &CouplingTensor, ops: &SpinOperators) -> [[C64; 4]; 4] {
    let mut out = [[C64::new(0.0, 0.0); 4]; 4];
    for p in 0..3 {
        for q in 0..3 {
            let c = d.0[p][q];
            for a1 in 0..2 {
                for a2 in 0..2 {
                    for b1 in 0..2 {
                        for b2 in 0..2 {
                            out[2 * a1 + b1][2 * a2 + b2] += ops.i[p][a1][a2] * ops.i[q][b1][b2] * c;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Hamiltonian of the electron plus the given nuclear spins, in the order
/// supplied.
pub fn spins_hamiltonian(
    positions: &[Vec3],
    bz_gauss: f64,
    constants: &PhysicalConstants,
) -> Result<HermitianOperator> {
    let k = positions.len();
    let hyperfine = positions
        .iter()
        .map(|r| hyperfine_tensor(r, constants))
        .collect::<Result<Vec<_>>>()?;
    let mut dipolar = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let r = sub(&positions[b], &positions[a]);
            dipolar.push(((a, b), dipolar_tensor(&r, constants.gamma_c, constants.gamma_c, constants)?));
        }
    }
    Ok(assemble(k, bz_gauss, constants, &hyperfine, &dipolar))
}

/// Assemble a cluster Hamiltonian from precomputed couplings.
pub fn assemble(
    k: usize,
    bz_gauss: f64,
    constants: &PhysicalConstants,
    hyperfine: &[CouplingTensor],
    dipolar: &[((usize, usize), CouplingTensor)],
) -> HermitianOperator {
    let ops = SpinOperators::new();
    let nb = 1usize << k;
    let n = 3 * nb;
    let bit = |j: usize| k - 1 - j;
    let levels = nv_levels(constants.d_internal(), constants.electron_zeeman(bz_gauss));
    let wn = constants.nuclear_zeeman(bz_gauss);

    let mut h = Mat::<C64>::zeros(n, n);
    for e in 0..3 {
        for b in 0..nb {
            // I_z = +1/2 for up (bit 0), -1/2 for down (bit 1)
            let mz: f64 = (0..k).map(|j| if (b >> bit(j)) & 1 == 0 { 0.5 } else { -0.5 }).sum();
            h[(e * nb + b, e * nb + b)] += C64::new(levels[e] - wn * mz, 0.0);
        }
    }

    for (j, a) in hyperfine.iter().enumerate() {
        let block = hyperfine_block(a, &ops);
        let sh = bit(j);
        for e in 0..3 {
            for b in 0..nb {
                let s = (b >> sh) & 1;
                let col = e * nb + b;
                for e2 in 0..3 {
                    for s2 in 0..2 {
                        let v = block[2 * e2 + s2][2 * e + s];
                        if v != C64::new(0.0, 0.0) {
                            let b2 = (b & !(1 << sh)) | (s2 << sh);
                            h[(e2 * nb + b2, col)] += v;
                        }
                    }
                }
            }
        }
    }

    for &((ja, jb), ref d) in dipolar {
        let block = dipolar_block(d, &ops);
        let (sa, sb) = (bit(ja), bit(jb));
        for e in 0..3 {
            for b in 0..nb {
                let x = (b >> sa) & 1;
                let y = (b >> sb) & 1;
                let col = e * nb + b;
                for x2 in 0..2 {
                    for y2 in 0..2 {
                        let v = block[2 * x2 + y2][2 * x + y];
                        if v != C64::new(0.0, 0.0) {
                            let b2 = (b & !(1 << sa) & !(1 << sb)) | (x2 << sa) | (y2 << sb);
                            h[(e * nb + b2, col)] += v;
                        }
                    }
                }
            }
        }
    }
    HermitianOperator::from_trusted(h)
}

/// Hamiltonian restricted to the electron plus the spins of `cluster`.
pub fn cluster_hamiltonian(
    bath: &SpinBath,
    cluster: &Cluster,
    bz_gauss: f64,
    constants: &PhysicalConstants,
) -> Result<HermitianOperator> {
    cluster.check_against(bath.len())?;
    let positions: Vec<Vec3> = cluster.indices().iter().map(|&i| bath.positions[i]).collect();
    spins_hamiltonian(&positions, bz_gauss, constants)
}

/// Hamiltonian of the electron plus every spin of the bath.
pub fn full_hamiltonian(
    bath: &SpinBath,
    bz_gauss: f64,
    constants: &PhysicalConstants,
) -> Result<HermitianOperator> {
    spins_hamiltonian(&bath.positions, bz_gauss, constants)
}
