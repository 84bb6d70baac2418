//! Chain geometry: couplings, Hamiltonian terms, initial product states.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of an XY chain with long-range couplings.
///
/// The Hamiltonian is
/// `H = sum_{i<j} J_ij (s+_i s-_j + s-_i s+_j) + B sum_j Z_j`
/// with hbar = 1. Couplings default to the power law
/// `J_ij = j0 / |i - j|^alpha`; an explicit symmetric matrix overrides the
/// power law when present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_sites: usize,
    pub alpha: f64,
    pub j0: f64,
    #[serde(default)]
    pub b_field: f64,
    /// Optional explicit coupling matrix, row-major, n_sites x n_sites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub couplings: Option<Vec<Vec<f64>>>,
}

impl ChainSpec {
    pub fn power_law(n_sites: usize, alpha: f64, j0: f64, b_field: f64) -> Result<Self> {
        let spec = ChainSpec { n_sites, alpha, j0, b_field, couplings: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 {
            return Err(Error::invalid("chain needs at least 2 sites"));
        }
        if self.couplings.is_none() {
            if self.alpha <= 0.0 || !self.alpha.is_finite() {
                return Err(Error::invalid("power-law exponent alpha must be positive"));
            }
            if !self.j0.is_finite() || self.j0 == 0.0 {
                return Err(Error::invalid("coupling scale j0 must be nonzero and finite"));
            }
        }
        if !self.b_field.is_finite() {
            return Err(Error::invalid("field must be finite"));
        }
        if let Some(rows) = &self.couplings {
            if rows.len() != self.n_sites || rows.iter().any(|r| r.len() != self.n_sites) {
                return Err(Error::invalid(format!(
                    "explicit couplings must be {0} x {0}",
                    self.n_sites
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                if row[i] != 0.0 {
                    return Err(Error::invalid("coupling matrix diagonal must be zero"));
                }
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::invalid("couplings must be finite"));
                    }
                    if (v - rows[j][i]).abs() > 1e-12 {
                        return Err(Error::invalid("coupling matrix must be symmetric"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ChainSpec =
            serde_json::from_str(text).map_err(|e| Error::format(format!("chain spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Builds the full symmetric coupling matrix for a chain.
pub fn build_couplings(spec: &ChainSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let n = spec.n_sites;
    let mut j = Array2::zeros((n, n));
    match &spec.couplings {
        Some(rows) => {
            for a in 0..n {
                for b in 0..n {
                    j[[a, b]] = rows[a][b];
                }
            }
        }
        None => {
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        j[[a, b]] = spec.j0 / (a as f64 - b as f64).abs().powf(spec.alpha);
                    }
                }
            }
        }
    }
    Ok(j)
}

/// Mean nearest-neighbour coupling, the natural inverse-time scale of the
/// chain: times are reported as the dimensionless product t * Jbar.
pub fn mean_nn_coupling(couplings: &Array2<f64>) -> f64 {
    let n = couplings.nrows();
    let sum: f64 = (0..n - 1).map(|i| couplings[[i, i + 1]]).sum();
    sum / (n - 1) as f64
}

/// Representation-independent term list consumed by the simulators.
#[derive(Debug, Clone)]
pub struct HamiltonianTerms {
    pub n_sites: usize,
    /// Flip-flop pairs (i, j, J_ij) with i < j and J_ij != 0.
    pub hop: Vec<(usize, usize, f64)>,
    /// Uniform transverse-field coefficient on sum_j Z_j.
    pub field: f64,
}

pub fn build_hamiltonian_terms(spec: &ChainSpec) -> Result<HamiltonianTerms> {
    let j = build_couplings(spec)?;
    let n = spec.n_sites;
    let mut hop = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            if j[[a, b]] != 0.0 {
                hop.push((a, b, j[[a, b]]));
            }
        }
    }
    Ok(HamiltonianTerms { n_sites: n, hop, field: spec.b_field })
}

/// Computational product state; bit 0 is up, site 0 leftmost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductState {
    bits: Vec<u8>,
}

impl ProductState {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("product state needs at least one site"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("product state bits must be 0 (up) or 1 (down)"));
        }
        Ok(ProductState { bits })
    }

    pub fn all_up(n: usize) -> Self {
        ProductState { bits: vec![0; n] }
    }

    pub fn n_sites(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Full-space amplitude index of this configuration.
    pub fn as_index(&self) -> usize {
        self.bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
    }

    /// Number of up spins.
    pub fn excitations(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }
}

/// Neel state `|up down up down ...>`, up on even sites.
pub fn neel_state(n_sites: usize) -> Result<ProductState> {
    if n_sites == 0 {
        return Err(Error::invalid("chain needs at least one site"));
    }
    ProductState::new((0..n_sites).map(|j| (j % 2) as u8).collect())
}
