//! Exact quench dynamics, reduced density matrices, and local noise.
//!
//! The XY Hamiltonian conserves the number of up spins, so evolution runs by
//! default in the excitation-number sector of the initial product state;
//! the full 2^n space is available for cross-checks. Propagation uses a
//! Lanczos exponential with adaptive step splitting; a dense
//! eigendecomposition path serves as the small-system oracle.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{Error, Result};
use crate::krylov::{self, HermitianOp, KrylovOptions};
use crate::pauli::Pauli;
use crate::spinmodel::{build_hamiltonian_terms, ChainSpec, HamiltonianTerms, ProductState};
use crate::{flip_site, site_bit, C64};

/// Largest chain the dense 2^n representation is allowed to touch.
const MAX_DENSE_SITES: usize = 20;

/// Fixed-excitation-number basis: all configurations with a given number of
/// up spins, listed in increasing amplitude-index order.
#[derive(Debug, Clone)]
pub struct SectorBasis {
    n_sites: usize,
    excitations: usize,
    configs: Vec<usize>,
    positions: HashMap<usize, usize>,
}

impl SectorBasis {
    pub fn new(n_sites: usize, excitations: usize) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_DENSE_SITES {
            return Err(Error::SizeLimit(format!(
                "sector basis supports 1..={MAX_DENSE_SITES} sites, got {n_sites}"
            )));
        }
        if excitations > n_sites {
            return Err(Error::invalid("more up spins than sites"));
        }
        let downs = n_sites - excitations;
        let configs: Vec<usize> =
            (0..1usize << n_sites).filter(|c| c.count_ones() as usize == downs).collect();
        let positions = configs.iter().enumerate().map(|(p, &c)| (c, p)).collect();
        Ok(SectorBasis { n_sites, excitations, configs, positions })
    }

    pub fn dim(&self) -> usize {
        self.configs.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn excitations(&self) -> usize {
        self.excitations
    }

    pub fn config(&self, position: usize) -> usize {
        self.configs[position]
    }

    pub fn position(&self, config: usize) -> Option<usize> {
        self.positions.get(&config).copied()
    }
}

#[derive(Debug, Clone)]
pub enum Basis {
    Full,
    Sector(Arc<SectorBasis>),
}

/// Normalized pure state over `n_sites` spins in either the full
/// computational basis or one excitation sector.
#[derive(Debug, Clone)]
pub struct StateVector {
    n_sites: usize,
    basis: Basis,
    amps: Array1<C64>,
}

impl StateVector {
    pub fn from_product(p: &ProductState, use_sector: bool) -> Result<Self> {
        let n = p.n_sites();
        if use_sector {
            let basis = SectorBasis::new(n, p.excitations())?;
            let pos = basis
                .position(p.as_index())
                .expect("product configuration lies in its own sector");
            let mut amps = Array1::zeros(basis.dim());
            amps[pos] = C64::new(1.0, 0.0);
            Ok(StateVector { n_sites: n, basis: Basis::Sector(Arc::new(basis)), amps })
        } else {
            if n > MAX_DENSE_SITES {
                return Err(Error::SizeLimit(format!(
                    "full basis limited to {MAX_DENSE_SITES} sites"
                )));
            }
            let mut amps = Array1::zeros(1usize << n);
            amps[p.as_index()] = C64::new(1.0, 0.0);
            Ok(StateVector { n_sites: n, basis: Basis::Full, amps })
        }
    }

    /// Wraps full-basis amplitudes, normalizing away rounding drift.
    /// Rejects vectors whose norm is off by more than 1e-6.
    pub fn from_full(n_sites: usize, amps: Array1<C64>) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_DENSE_SITES {
            return Err(Error::SizeLimit(format!(
                "full basis limited to {MAX_DENSE_SITES} sites"
            )));
        }
        if amps.len() != 1 << n_sites {
            return Err(Error::invalid("amplitude count must be 2^n"));
        }
        let norm = vec_norm(&amps);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("state norm {norm} too far from 1")));
        }
        Ok(StateVector { n_sites, basis: Basis::Full, amps: amps / C64::new(norm, 0.0) })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        vec_norm(&self.amps)
    }

    /// Dense amplitudes over the full 2^n basis.
    pub fn to_full(&self) -> Array1<C64> {
        match &self.basis {
            Basis::Full => self.amps.clone(),
            Basis::Sector(sb) => {
                let mut full = Array1::zeros(1usize << self.n_sites);
                for (pos, &amp) in self.amps.iter().enumerate() {
                    full[sb.config(pos)] = amp;
                }
                full
            }
        }
    }

    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.n_sites != other.n_sites {
            return Err(Error::invalid("states live on different chains"));
        }
        let a = self.to_full();
        let b = other.to_full();
        Ok(a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum())
    }
}

fn vec_norm(v: &Array1<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Hamiltonian action restricted to one excitation sector.
struct SectorHamiltonian {
    diag: Vec<f64>,
    /// Symmetric flip-flop entries (position a, position b, J), a < b.
    hops: Vec<(u32, u32, f64)>,
}

impl SectorHamiltonian {
    fn build(terms: &HamiltonianTerms, basis: &SectorBasis) -> Self {
        let n = basis.n_sites();
        let diag = (0..basis.dim())
            .map(|p| {
                let c = basis.config(p);
                terms.field * (n as f64 - 2.0 * c.count_ones() as f64)
            })
            .collect();
        let mut hops = Vec::new();
        for p in 0..basis.dim() {
            let c = basis.config(p);
            for &(i, j, jij) in &terms.hop {
                if site_bit(c, i, n) != site_bit(c, j, n) {
                    let partner = flip_site(flip_site(c, i, n), j, n);
                    if partner > c {
                        let q = basis.position(partner).expect("flip-flop stays in sector");
                        hops.push((p as u32, q as u32, jij));
                    }
                }
            }
        }
        SectorHamiltonian { diag, hops }
    }
}

impl HermitianOp for SectorHamiltonian {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, v: &[C64], out: &mut [C64]) {
        for (o, (&d, &x)) in out.iter_mut().zip(self.diag.iter().zip(v.iter())) {
            *o = C64::new(d, 0.0) * x;
        }
        for &(a, b, j) in &self.hops {
            let (a, b) = (a as usize, b as usize);
            out[a] += C64::new(j, 0.0) * v[b];
            out[b] += C64::new(j, 0.0) * v[a];
        }
    }
}

/// Hamiltonian action on the full 2^n basis.
struct FullHamiltonian {
    n_sites: usize,
    terms: HamiltonianTerms,
}

impl HermitianOp for FullHamiltonian {
    fn dim(&self) -> usize {
        1usize << self.n_sites
    }

    fn apply(&self, v: &[C64], out: &mut [C64]) {
        let n = self.n_sites;
        for (c, o) in out.iter_mut().enumerate() {
            let z = n as f64 - 2.0 * c.count_ones() as f64;
            *o = C64::new(self.terms.field * z, 0.0) * v[c];
        }
        for &(i, j, jij) in &self.terms.hop {
            let jc = C64::new(jij, 0.0);
            for c in 0..self.dim() {
                if site_bit(c, i, n) != site_bit(c, j, n) {
                    let partner = flip_site(flip_site(c, i, n), j, n);
                    if partner > c {
                        let (vc, vp) = (v[c], v[partner]);
                        out[c] += jc * vp;
                        out[partner] += jc * vc;
                    }
                }
            }
        }
    }
}

fn dense_matrix<H: HermitianOp + ?Sized>(h: &H) -> Array2<C64> {
    let dim = h.dim();
    let mut out = Array2::zeros((dim, dim));
    let mut unit = vec![C64::new(0.0, 0.0); dim];
    let mut col = vec![C64::new(0.0, 0.0); dim];
    for j in 0..dim {
        unit[j] = C64::new(1.0, 0.0);
        col.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        h.apply(&unit, &mut col);
        for i in 0..dim {
            out[[i, j]] = col[i];
        }
        unit[j] = C64::new(0.0, 0.0);
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvolveOptions {
    /// Local error tolerance of the Krylov propagator.
    pub krylov_tol: f64,
    pub max_krylov_dim: usize,
    /// Hard cap on the chain length.
    pub max_sites: usize,
    /// Restrict to the excitation sector of the initial state.
    pub use_sector: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { krylov_tol: 1e-10, max_krylov_dim: 64, max_sites: 16, use_sector: true }
    }
}

/// Evolves a product state under the chain Hamiltonian for time `t`.
pub fn evolve_exact(spec: &ChainSpec, initial: &ProductState, t: f64) -> Result<StateVector> {
    evolve_with(spec, initial, t, &EvolveOptions::default())
}

pub fn evolve_with(
    spec: &ChainSpec,
    initial: &ProductState,
    t: f64,
    opts: &EvolveOptions,
) -> Result<StateVector> {
    if initial.n_sites() != spec.n_sites {
        return Err(Error::invalid("initial state length does not match chain"));
    }
    let state = StateVector::from_product(initial, opts.use_sector)?;
    evolve_state(spec, &state, t, opts)
}

/// Evolves an arbitrary state in its own basis (sector states stay in their
/// sector, which the Hamiltonian preserves exactly).
pub fn evolve_state(
    spec: &ChainSpec,
    state: &StateVector,
    t: f64,
    opts: &EvolveOptions,
) -> Result<StateVector> {
    if spec.n_sites != state.n_sites() {
        return Err(Error::invalid("state length does not match chain"));
    }
    if spec.n_sites > opts.max_sites {
        return Err(Error::SizeLimit(format!(
            "chain of {} sites exceeds configured maximum {}",
            spec.n_sites, opts.max_sites
        )));
    }
    let terms = build_hamiltonian_terms(spec)?;
    let kopts = KrylovOptions {
        tol: opts.krylov_tol,
        max_dim: opts.max_krylov_dim,
        ..KrylovOptions::default()
    };
    let amps = match &state.basis {
        Basis::Sector(sb) => {
            let h = SectorHamiltonian::build(&terms, sb);
            krylov::evolve_krylov(&h, &state.amps, t, &kopts)?
        }
        Basis::Full => {
            let h = FullHamiltonian { n_sites: spec.n_sites, terms };
            krylov::evolve_krylov(&h, &state.amps, t, &kopts)?
        }
    };
    let norm = vec_norm(&amps);
    Ok(StateVector {
        n_sites: state.n_sites,
        basis: state.basis.clone(),
        amps: amps / C64::new(norm, 0.0),
    })
}

/// Dense eigendecomposition propagator, the oracle for the Krylov path.
pub fn evolve_dense(
    spec: &ChainSpec,
    initial: &ProductState,
    t: f64,
    use_sector: bool,
) -> Result<StateVector> {
    if initial.n_sites() != spec.n_sites {
        return Err(Error::invalid("initial state length does not match chain"));
    }
    let state = StateVector::from_product(initial, use_sector)?;
    if state.dim() > 4096 {
        return Err(Error::SizeLimit(format!(
            "dense propagator limited to dimension 4096, got {}",
            state.dim()
        )));
    }
    let terms = build_hamiltonian_terms(spec)?;
    let h = match &state.basis {
        Basis::Sector(sb) => dense_matrix(&SectorHamiltonian::build(&terms, sb)),
        Basis::Full => dense_matrix(&FullHamiltonian { n_sites: spec.n_sites, terms }),
    };
    let (evals, evecs) = crate::linalg::eigh_full(&h)?;
    let dim = state.dim();
    let mut coeffs: Array1<C64> = Array1::zeros(dim);
    for col in 0..dim {
        let mut c = C64::new(0.0, 0.0);
        for row in 0..dim {
            c += evecs[[row, col]].conj() * state.amps[row];
        }
        coeffs[col] = c * C64::new(0.0, -evals[col] * t).exp();
    }
    let mut amps: Array1<C64> = Array1::zeros(dim);
    for row in 0..dim {
        for col in 0..dim {
            amps[row] += evecs[[row, col]] * coeffs[col];
        }
    }
    let norm = vec_norm(&amps);
    Ok(StateVector { n_sites: state.n_sites, basis: state.basis, amps: amps / C64::new(norm, 0.0) })
}

/// Validated density matrix: Hermitian, unit trace, positive semidefinite
/// within documented tolerances.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: Array2<C64>,
}

impl DensityMatrix {
    pub fn new(mat: Array2<C64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::invalid("density matrix must be square"));
        }
        let dim = mat.nrows();
        if dim == 0 || !dim.is_power_of_two() {
            return Err(Error::invalid("density matrix dimension must be a power of 2"));
        }
        let mut herm_dev: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                herm_dev = herm_dev.max((mat[[i, j]] - mat[[j, i]].conj()).norm());
            }
        }
        if herm_dev > 1e-10 {
            return Err(Error::invalid(format!("matrix not Hermitian (deviation {herm_dev:e})")));
        }
        let trace: C64 = (0..dim).map(|i| mat[[i, i]]).sum();
        if (trace.re - 1.0).abs() > 1e-10 || trace.im.abs() > 1e-10 {
            return Err(Error::invalid(format!("trace {trace} must be 1")));
        }
        let hermitized = hermitize(&mat);
        let (evals, _) = hermitized.eigh(UPLO::Lower)?;
        if let Some(min) = evals.iter().cloned().reduce(f64::min) {
            if min < -1e-10 {
                return Err(Error::invalid(format!("negative eigenvalue {min:e}")));
            }
        }
        Ok(DensityMatrix { mat: hermitized })
    }

    /// Trusted constructor for matrices that are positive by construction;
    /// hermitizes and rescales the trace to absorb rounding.
    pub(crate) fn new_unchecked(mat: Array2<C64>) -> Self {
        let mut m = hermitize(&mat);
        let trace: f64 = (0..m.nrows()).map(|i| m[[i, i]].re).sum();
        if trace > 0.0 {
            m.mapv_inplace(|z| z / trace);
        }
        DensityMatrix { mat: m }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.mat.nrows().trailing_zeros() as usize
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.mat
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let (evals, _) = self.mat.eigh(UPLO::Lower)?;
        Ok(evals.to_vec())
    }

    /// tr(rho * op).
    pub fn expectation(&self, op: &Array2<C64>) -> C64 {
        let dim = self.dim();
        let mut tr = C64::new(0.0, 0.0);
        for i in 0..dim {
            for j in 0..dim {
                tr += self.mat[[i, j]] * op[[j, i]];
            }
        }
        tr
    }

    pub fn purity(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum()
    }

    /// <psi| rho |psi> for a dense pure state of matching dimension.
    pub fn fidelity_with_pure(&self, psi: &Array1<C64>) -> Result<f64> {
        if psi.len() != self.dim() {
            return Err(Error::invalid("state dimension does not match density matrix"));
        }
        let mut val = C64::new(0.0, 0.0);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                val += psi[i].conj() * self.mat[[i, j]] * psi[j];
            }
        }
        Ok(val.re)
    }
}

fn hermitize(m: &Array2<C64>) -> Array2<C64> {
    let dag = m.mapv(|z| z.conj()).t().to_owned();
    (m + &dag).mapv(|z| z * 0.5)
}

/// Reduced density matrix on a strictly increasing site list.
pub fn reduced_density_matrix(state: &StateVector, sites: &[usize]) -> Result<DensityMatrix> {
    let n = state.n_sites();
    if sites.is_empty() || sites.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("site list must be strictly increasing and nonempty"));
    }
    if *sites.last().expect("nonempty") >= n {
        return Err(Error::invalid("site index out of range"));
    }
    let k = sites.len();
    if k > 10 {
        return Err(Error::SizeLimit("reductions limited to 10 sites".into()));
    }
    let full = state.to_full();
    let keep_dim = 1usize << k;
    let rest_dim = 1usize << (n - k);
    let mut m: Array2<C64> = Array2::zeros((keep_dim, rest_dim));
    let site_is_kept: Vec<Option<usize>> = {
        let mut v = vec![None; n];
        for (pos, &s) in sites.iter().enumerate() {
            v[s] = Some(pos);
        }
        v
    };
    for (idx, &amp) in full.iter().enumerate() {
        if amp == C64::new(0.0, 0.0) {
            continue;
        }
        let mut a = 0usize;
        let mut r = 0usize;
        for (site, kept) in site_is_kept.iter().enumerate() {
            let bit = site_bit(idx, site, n);
            match kept {
                Some(pos) => a |= bit << (k - 1 - pos),
                None => r = (r << 1) | bit,
            }
        }
        m[[a, r]] += amp;
    }
    let mdag = m.mapv(|z| z.conj()).t().to_owned();
    Ok(DensityMatrix::new_unchecked(m.dot(&mdag)))
}

/// All contiguous k-site window reductions, window start ascending.
pub fn exact_local_reductions(state: &StateVector, k: usize) -> Result<Vec<DensityMatrix>> {
    let n = state.n_sites();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("window width {k} invalid for {n} sites")));
    }
    (0..=n - k)
        .map(|start| {
            let sites: Vec<usize> = (start..start + k).collect();
            reduced_density_matrix(state, &sites)
        })
        .collect()
}

/// <state| P |state> for a full-length Pauli word.
pub fn pauli_expectation_exact(state: &StateVector, word: &[Pauli]) -> Result<f64> {
    let n = state.n_sites();
    if word.len() != n {
        return Err(Error::invalid("Pauli word length must match chain length"));
    }
    let full = state.to_full();
    let mut acc = C64::new(0.0, 0.0);
    for (idx, &amp) in full.iter().enumerate() {
        if amp == C64::new(0.0, 0.0) {
            continue;
        }
        let mut target = idx;
        let mut phase = C64::new(1.0, 0.0);
        for (site, &p) in word.iter().enumerate() {
            let bit = site_bit(target, site, n);
            let (new_bit, ph) = p.apply_to_bit(bit);
            if new_bit != bit {
                target = flip_site(target, site, n);
            }
            phase *= ph;
        }
        acc += full[target].conj() * phase * amp;
    }
    Ok(acc.re)
}

/// Partial trace of a raw k-site matrix onto the listed positions
/// (positions index the matrix's own sites, ascending).
pub fn partial_trace(mat: &Array2<C64>, n_sites: usize, keep: &[usize]) -> Result<Array2<C64>> {
    if mat.nrows() != 1 << n_sites || mat.ncols() != 1 << n_sites {
        return Err(Error::invalid("matrix dimension does not match site count"));
    }
    if keep.is_empty() || keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("kept positions must be strictly increasing and nonempty"));
    }
    if *keep.last().expect("nonempty") >= n_sites {
        return Err(Error::invalid("kept position out of range"));
    }
    let k = keep.len();
    let traced: Vec<usize> = (0..n_sites).filter(|s| !keep.contains(s)).collect();
    let mut out: Array2<C64> = Array2::zeros((1 << k, 1 << k));
    let rest = 1usize << traced.len();
    for a in 0..1usize << k {
        for b in 0..1usize << k {
            let mut sum = C64::new(0.0, 0.0);
            for r in 0..rest {
                let mut row = 0usize;
                let mut col = 0usize;
                for (pos, &s) in keep.iter().enumerate() {
                    let shift = n_sites - 1 - s;
                    row |= ((a >> (k - 1 - pos)) & 1) << shift;
                    col |= ((b >> (k - 1 - pos)) & 1) << shift;
                }
                for (pos, &s) in traced.iter().enumerate() {
                    let shift = n_sites - 1 - s;
                    let bit = (r >> (traced.len() - 1 - pos)) & 1;
                    row |= bit << shift;
                    col |= bit << shift;
                }
                sum += mat[[row, col]];
            }
            out[[a, b]] = sum;
        }
    }
    Ok(out)
}

/// Applies the single-site depolarizing channel with probability `p` to
/// every site of a density matrix.
pub fn depolarize(rho: &DensityMatrix, p: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("depolarizing probability must lie in [0, 1]"));
    }
    let k = rho.n_sites();
    let mut mat = rho.matrix().clone();
    let dim = mat.nrows();
    for site in 0..k {
        let mask = 1usize << (k - 1 - site);
        let mut next = mat.mapv(|z| z * (1.0 - p));
        for r in 0..dim {
            for c in 0..dim {
                if (r & mask) == (c & mask) {
                    let r0 = r & !mask;
                    let c0 = c & !mask;
                    next[[r, c]] += (mat[[r0, c0]] + mat[[r0 | mask, c0 | mask]]) * (0.5 * p);
                }
            }
        }
        mat = next;
    }
    Ok(DensityMatrix::new_unchecked(mat))
}

/// Full density matrix of a pure state; dense, so capped at 10 sites.
pub fn density_from_state(state: &StateVector) -> Result<DensityMatrix> {
    if state.n_sites() > 10 {
        return Err(Error::SizeLimit("dense density matrices limited to 10 sites".into()));
    }
    let full = state.to_full();
    let dim = full.len();
    let mut mat: Array2<C64> = Array2::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            mat[[i, j]] = full[i] * full[j].conj();
        }
    }
    Ok(DensityMatrix::new_unchecked(mat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::parse_word;
    use crate::spinmodel::neel_state;
    use approx::assert_abs_diff_eq;

    fn two_site_spec() -> ChainSpec {
        ChainSpec::power_law(2, 1.6, 1.0, 0.0).unwrap()
    }

    fn state_diff(a: &StateVector, b: &StateVector) -> f64 {
        let fa = a.to_full();
        let fb = b.to_full();
        // Align the global phase on the largest amplitude.
        let ix = fa
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.norm().partial_cmp(&y.1.norm()).unwrap())
            .unwrap()
            .0;
        let phase = if fb[ix].norm() > 1e-12 { fa[ix] / fb[ix] * fb[ix].norm() / fa[ix].norm() } else { C64::new(1.0, 0.0) };
        fa.iter()
            .zip(fb.iter())
            .map(|(x, y)| (x - y * phase).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn sector_basis_counts_configurations() {
        let sb = SectorBasis::new(14, 7).unwrap();
        assert_eq!(sb.dim(), 3432);
        let sb = SectorBasis::new(4, 2).unwrap();
        assert_eq!(sb.dim(), 6);
        for p in 0..sb.dim() {
            assert_eq!(sb.position(sb.config(p)), Some(p));
        }
    }

    #[test]
    fn two_site_quench_matches_closed_form() {
        // |up down> evolves to cos(Jt)|up down> - i sin(Jt)|down up>.
        let spec = two_site_spec();
        let neel = neel_state(2).unwrap();
        for &t in &[0.0, 0.3, 1.7] {
            let state = evolve_exact(&spec, &neel, t).unwrap();
            let full = state.to_full();
            assert_abs_diff_eq!(full[0b01].re, t.cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(full[0b01].im, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(full[0b10].re, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(full[0b10].im, -t.sin(), epsilon = 1e-10);
        }
    }

    #[test]
    fn krylov_agrees_with_dense_oracle() {
        let spec = ChainSpec::power_law(8, 1.6, 1.0, 0.0).unwrap();
        let neel = neel_state(8).unwrap();
        for &t in &[0.2, 0.9, 2.5] {
            let fast = evolve_exact(&spec, &neel, t).unwrap();
            let slow = evolve_dense(&spec, &neel, t, true).unwrap();
            assert!(state_diff(&fast, &slow) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn sector_and_full_space_evolutions_agree() {
        let spec = ChainSpec::power_law(6, 1.3, 1.0, 0.2).unwrap();
        let neel = neel_state(6).unwrap();
        let opts_full = EvolveOptions { use_sector: false, ..EvolveOptions::default() };
        for &t in &[0.4, 1.3] {
            let sector = evolve_exact(&spec, &neel, t).unwrap();
            let full = evolve_with(&spec, &neel, t, &opts_full).unwrap();
            assert!(state_diff(&sector, &full) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn full_space_evolution_keeps_other_sectors_empty() {
        let spec = ChainSpec::power_law(6, 1.6, 1.0, 0.0).unwrap();
        let neel = neel_state(6).unwrap();
        let opts_full = EvolveOptions { use_sector: false, ..EvolveOptions::default() };
        let state = evolve_with(&spec, &neel, 0.8, &opts_full).unwrap();
        let downs = 6 - neel.excitations();
        for (idx, amp) in state.to_full().iter().enumerate() {
            if idx.count_ones() as usize != downs {
                assert_eq!(amp.norm(), 0.0, "config {idx:b} left the sector");
            }
        }
    }

    #[test]
    fn evolution_is_additive_in_time() {
        let spec = ChainSpec::power_law(7, 1.4, 1.0, 0.1).unwrap();
        let neel = neel_state(7).unwrap();
        let opts = EvolveOptions::default();
        let direct = evolve_exact(&spec, &neel, 1.1).unwrap();
        let first = evolve_exact(&spec, &neel, 0.4).unwrap();
        let composed = evolve_state(&spec, &first, 0.7, &opts).unwrap();
        assert!(state_diff(&direct, &composed) < 1e-9);
    }

    #[test]
    fn energy_is_conserved() {
        let spec = ChainSpec::power_law(6, 1.6, 1.0, 0.3).unwrap();
        let neel = neel_state(6).unwrap();
        let terms = build_hamiltonian_terms(&spec).unwrap();
        let sb = SectorBasis::new(6, neel.excitations()).unwrap();
        let h = SectorHamiltonian::build(&terms, &sb);
        let energy = |s: &StateVector| {
            let hv = krylov::apply_op(&h, s.amplitudes());
            s.amplitudes().iter().zip(hv.iter()).map(|(a, b)| a.conj() * b).sum::<C64>().re
        };
        let e0 = energy(&evolve_exact(&spec, &neel, 0.0).unwrap());
        let e1 = energy(&evolve_exact(&spec, &neel, 2.0).unwrap());
        assert_abs_diff_eq!(e0, e1, epsilon = 1e-9);
        // The Neel state has zero field expectation and zero hop energy.
        assert_abs_diff_eq!(e0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn norm_is_preserved() {
        let spec = ChainSpec::power_law(9, 1.2, 1.0, 0.0).unwrap();
        let neel = neel_state(9).unwrap();
        let state = evolve_exact(&spec, &neel, 3.0).unwrap();
        assert_abs_diff_eq!(state.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn neel_reductions_are_pure_site_states() {
        let spec = ChainSpec::power_law(4, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(4).unwrap(), 0.0).unwrap();
        let reds = exact_local_reductions(&state, 1).unwrap();
        assert_eq!(reds.len(), 4);
        for (site, red) in reds.iter().enumerate() {
            let up = red.matrix()[[0, 0]].re;
            let want = if site % 2 == 0 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(up, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_site_reduction_matches_closed_form() {
        let spec = two_site_spec();
        let t = 0.7;
        let state = evolve_exact(&spec, &neel_state(2).unwrap(), t).unwrap();
        let red = reduced_density_matrix(&state, &[0]).unwrap();
        assert_abs_diff_eq!(red.matrix()[[0, 0]].re, t.cos().powi(2), epsilon = 1e-10);
        assert_abs_diff_eq!(red.matrix()[[1, 1]].re, t.sin().powi(2), epsilon = 1e-10);
        assert_abs_diff_eq!(red.matrix()[[0, 1]].norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn reductions_compose_with_partial_trace() {
        let spec = ChainSpec::power_law(6, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(6).unwrap(), 0.9).unwrap();
        let big = reduced_density_matrix(&state, &[1, 3, 4]).unwrap();
        let small = reduced_density_matrix(&state, &[1, 4]).unwrap();
        let traced = partial_trace(big.matrix(), 3, &[0, 2]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(
                    traced[[i, j]].re,
                    small.matrix()[[i, j]].re,
                    epsilon = 1e-10
                );
                assert_abs_diff_eq!(
                    traced[[i, j]].im,
                    small.matrix()[[i, j]].im,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn pauli_expectations_match_dense_operators() {
        let spec = ChainSpec::power_law(6, 1.3, 1.0, 0.1).unwrap();
        let state = evolve_exact(&spec, &neel_state(6).unwrap(), 1.2).unwrap();
        let full = state.to_full();
        for word_str in ["ZZIIII", "XXIIII", "IYYIII", "XIZIYI", "ZIIIIZ"] {
            let word = parse_word(word_str).unwrap();
            let op = crate::pauli::word_operator(&word);
            let want: C64 = {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..full.len() {
                    for j in 0..full.len() {
                        acc += full[i].conj() * op[[i, j]] * full[j];
                    }
                }
                acc
            };
            let got = pauli_expectation_exact(&state, &word).unwrap();
            assert_abs_diff_eq!(got, want.re, epsilon = 1e-11);
        }
    }

    #[test]
    fn single_site_depolarizing_mixes_toward_identity() {
        let mut mat: Array2<C64> = Array2::zeros((2, 2));
        mat[[0, 0]] = C64::new(0.9, 0.0);
        mat[[1, 1]] = C64::new(0.1, 0.0);
        mat[[0, 1]] = C64::new(0.2, 0.1);
        mat[[1, 0]] = C64::new(0.2, -0.1);
        let rho = DensityMatrix::new(mat.clone()).unwrap();
        let p = 0.3;
        let noisy = depolarize(&rho, p).unwrap();
        assert_abs_diff_eq!(noisy.matrix()[[0, 0]].re, (1.0 - p) * 0.9 + p * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(noisy.matrix()[[0, 1]].re, (1.0 - p) * 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(noisy.matrix()[[0, 1]].im, (1.0 - p) * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn depolarizing_factorizes_over_product_states() {
        // On |up up>, each site depolarizes independently:
        // diagonal must be ((1-p/2)^2, (1-p/2)(p/2), ...).
        let state = StateVector::from_product(&ProductState::all_up(2), false).unwrap();
        let rho = density_from_state(&state).unwrap();
        let p = 0.2;
        let noisy = depolarize(&rho, p).unwrap();
        let up = 1.0 - p / 2.0;
        let dn = p / 2.0;
        let want = [up * up, up * dn, dn * up, dn * dn];
        for (i, w) in want.iter().enumerate() {
            assert_abs_diff_eq!(noisy.matrix()[[i, i]].re, *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn depolarizing_commutes_with_partial_trace() {
        // Noise applied before or after tracing out sites must agree; this
        // is what lets the pipeline build exact noisy window reductions for
        // chains too large for a dense global density matrix.
        let spec = ChainSpec::power_law(5, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(5).unwrap(), 0.8).unwrap();
        let p = 0.12;
        let global = depolarize(&density_from_state(&state).unwrap(), p).unwrap();
        let window = reduced_density_matrix(&state, &[1, 2]).unwrap();
        let late = depolarize(&window, p).unwrap();
        let early = partial_trace(global.matrix(), 5, &[1, 2]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d = (late.matrix()[[i, j]] - early[[i, j]]).norm();
                assert!(d < 1e-10, "entry ({i},{j}) differs by {d}");
            }
        }
    }

    #[test]
    fn density_matrix_validation_rejects_bad_inputs() {
        let mut non_herm: Array2<C64> = Array2::zeros((2, 2));
        non_herm[[0, 0]] = C64::new(1.0, 0.0);
        non_herm[[0, 1]] = C64::new(0.5, 0.0);
        assert!(DensityMatrix::new(non_herm).is_err());

        let mut bad_trace: Array2<C64> = Array2::zeros((2, 2));
        bad_trace[[0, 0]] = C64::new(0.7, 0.0);
        bad_trace[[1, 1]] = C64::new(0.7, 0.0);
        assert!(DensityMatrix::new(bad_trace).is_err());

        let mut negative: Array2<C64> = Array2::zeros((2, 2));
        negative[[0, 0]] = C64::new(1.2, 0.0);
        negative[[1, 1]] = C64::new(-0.2, 0.0);
        assert!(DensityMatrix::new(negative).is_err());
    }

    #[test]
    fn oversized_requests_hit_size_limits() {
        let spec = ChainSpec::power_law(17, 1.6, 1.0, 0.0).unwrap();
        let neel = neel_state(17).unwrap();
        match evolve_exact(&spec, &neel, 0.1) {
            Err(Error::SizeLimit(_)) => {}
            other => panic!("expected size limit, got {other:?}"),
        }
    }
}
