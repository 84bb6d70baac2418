//! Tomography of quenched spin-1/2 chains from local measurements.
//!
//! The crate covers the full pipeline: exact simulation of power-law XY
//! quench dynamics, simulated single-site measurement campaigns, estimation
//! of k-site reduced density matrices, variational matrix-product-state
//! reconstruction, and certified fidelity lower bounds from parent
//! Hamiltonians, plus entanglement and correlation analysis.
//!
//! Conventions used throughout:
//!
//! * Sites are 0-indexed; site 0 is the leftmost spin and the most
//!   significant factor in tensor products.
//! * The local basis is (up, down); basis index 0 is up, the +1 eigenstate
//!   of Z. A full-space amplitude index packs site j into bit (n - 1 - j),
//!   so `|up..up>` is amplitude index 0.
//! * Outcome bitstrings are written site 0 first; character '1' records the
//!   +1 outcome along the measured axis.
//! * hbar = 1: couplings are angular frequencies and times are seconds.
//! * Entropies are base-2 (bits).

pub mod analysis;
pub mod certify;
pub mod error;
pub mod exactsim;
mod krylov;
mod linalg;
pub mod localtomo;
pub mod measure;
pub mod mps;
pub mod pauli;
pub mod reconstruct;
pub mod seed;
pub mod spinmodel;

pub use error::{Error, Result};

/// Complex scalar used for all state and operator data.
pub type C64 = num_complex::Complex64;

/// Bit of `index` describing site `site` in an `n`-site chain: 0 is up.
#[inline]
pub(crate) fn site_bit(index: usize, site: usize, n: usize) -> usize {
    (index >> (n - 1 - site)) & 1
}

/// Flips the bit of `index` describing site `site`.
#[inline]
pub(crate) fn flip_site(index: usize, site: usize, n: usize) -> usize {
    index ^ (1 << (n - 1 - site))
}
