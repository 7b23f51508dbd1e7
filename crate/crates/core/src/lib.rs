//! Cluster-correlation expansion simulator for the longitudinal relaxation of
//! an NV-center electron spin in a 13C nuclear spin bath.
//!
//! Units throughout: energies in rad/us, times in us, lengths in nm, and the
//! magnetic field in gauss at the public interface.

pub mod analysis;
pub mod cce;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod lattice;
pub mod oracle;

pub use error::{Error, Result};
