//! Certified fidelity lower bounds for a reconstructed state.
//!
//! From the MPS estimate a parent Hamiltonian H = sum_i h_i is assembled,
//! where h_i projects onto the complement of the estimate's window-i
//! support. Each h_i >= 0 and nearly annihilates the estimate, so the
//! estimate sits at the bottom of H's spectrum. If the ground state is
//! unique with spectral gap g, every state rho obeys
//! tr(H rho) >= E0 + g (1 - F), hence F >= 1 - tr(H rho)/g, and
//! tr(H rho) = sum_i tr(rho_i h_i) needs only the measured window
//! reductions. The bound therefore certifies the estimate without trusting
//! the reconstruction that produced it.

use std::collections::BTreeMap;

use ndarray::Array2;
use ndarray_linalg::{EigValsh, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactsim::{density_from_state, depolarize, evolve_exact};
use crate::krylov::{lowest_eigenpairs, HermitianOp};
use crate::localtomo::{linear_inversion, WindowEstimate};
use crate::measure::NoiseModel;
use crate::mps::Mps;
use crate::reconstruct::ReconstructionOptions;
use crate::seed::derive_seed;
use crate::spinmodel::{ChainSpec, ProductState};
use crate::C64;

const FORMAT: &str = "cert-v1";

/// Ground-space degeneracy is resolved at this eigenvalue spacing.
const DEGENERACY_TOL: f64 = 1e-6;

/// Largest total weight the estimate may carry outside its own window
/// supports while its certificate still counts as valid.
const ANNIHILATION_TOL: f64 = 1e-8;

/// Dense eigensolve cutoff; larger spaces go through restarted Lanczos.
const DENSE_DIM: usize = 1 << 10;

/// Default eigenvalue threshold separating a window's support from its
/// numerically-zero complement.
pub const DEFAULT_SUPPORT_TOL: f64 = 1e-7;

/// Bond caps that keep every width-k window reduction rank-deficient, so
/// each window support constrains the state and the parent Hamiltonian can
/// have a unique ground state. A window spanning bonds of dimension a and b
/// has reduction rank at most a*b; a*b >= 2^k makes its term vanish.
///
/// Odd k: uniform D = 2^((k-1)/2), giving rank D^2 = 2^(k-1) everywhere.
/// Even k: width-k tiles (rank-1 supports at tile boundaries) with
/// unrestricted entanglement inside each tile; the tiling pins the state
/// even though windows straddling two tiles may be unconstrained.
pub fn certifiable_bond_caps(n_sites: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || n_sites < 2 || k > n_sites {
        return Err(Error::invalid("need 0 < k <= n_sites and at least 2 sites"));
    }
    let caps = if k % 2 == 1 {
        vec![1usize << ((k - 1) / 2); n_sites - 1]
    } else {
        (1..n_sites)
            .map(|b| {
                let r = b % k;
                if r == 0 {
                    1
                } else {
                    1usize << r.min(k - r)
                }
            })
            .collect()
    };
    Ok(caps)
}

/// Reconstruction options preloaded with the certifiable cap pattern for an
/// n-site chain and width-k windows.
pub fn certifiable_recon_options(n_sites: usize, k: usize) -> Result<ReconstructionOptions> {
    let caps = certifiable_bond_caps(n_sites, k)?;
    let mut opts = ReconstructionOptions::for_width(k);
    opts.bond_dim = caps.iter().copied().max().unwrap_or(1);
    opts.bond_caps = Some(caps);
    Ok(opts)
}

/// One window term of the parent Hamiltonian: h = 1 - P with P the
/// projector onto the support of the estimate's window reduction.
#[derive(Debug, Clone)]
pub struct WindowProjectorTerm {
    pub start: usize,
    pub width: usize,
    /// 2^width x 2^width Hermitian projector complement.
    pub h: Array2<C64>,
    /// Weight of the estimate's own window reduction outside the support,
    /// i.e. its expectation of `h`.
    pub mps_energy: f64,
    /// Some eigenvalue fell within a factor 10 of the support threshold,
    /// so the support dimension is sensitive to the threshold choice.
    pub straddling: bool,
}

/// Window projector complements for every length-k window of the state.
/// Eigenvalues of each window reduction above `support_tol` span the
/// support; the returned terms annihilate the state up to the weight it
/// carries below the threshold.
pub fn parent_hamiltonian(
    mps: &Mps,
    k: usize,
    support_tol: f64,
) -> Result<Vec<WindowProjectorTerm>> {
    let n = mps.n_sites();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("window width {k} invalid for {n} sites")));
    }
    if k > 8 {
        return Err(Error::SizeLimit(format!("window width {k} exceeds the dense limit of 8")));
    }
    if !(support_tol > 0.0 && support_tol < 1.0) {
        return Err(Error::invalid("support threshold must lie in (0, 1)"));
    }
    let psi = mps.normalized()?;
    let dim = 1usize << k;
    let mut terms = Vec::with_capacity(n - k + 1);
    for start in 0..=(n - k) {
        let rho = psi.window_reduction(start, k)?;
        let (evals, vecs) = crate::linalg::eigh_full(rho.matrix())?;
        let mut h = Array2::<C64>::eye(dim);
        let mut dropped = 0.0;
        let mut straddling = false;
        for (idx, &lam) in evals.iter().enumerate() {
            if lam > support_tol / 10.0 && lam < support_tol * 10.0 {
                straddling = true;
            }
            if lam > support_tol {
                let v = vecs.column(idx);
                for r in 0..dim {
                    for c in 0..dim {
                        h[[r, c]] -= v[r] * v[c].conj();
                    }
                }
            } else {
                dropped += lam.max(0.0);
            }
        }
        let h = h.mapv(|z| z * 0.5) + h.t().mapv(|z| z.conj() * 0.5);
        terms.push(WindowProjectorTerm { start, width: k, h, mps_energy: dropped, straddling });
    }
    Ok(terms)
}

/// Sum of window terms acting on the full 2^n space. A term touches only
/// its window's bits, so one application costs dim * 2^k per term.
struct SumOp<'a> {
    n_sites: usize,
    terms: &'a [WindowProjectorTerm],
}

impl SumOp<'_> {
    fn accumulate(&self, idx: usize, v: &[C64]) -> C64 {
        let n = self.n_sites;
        let mut acc = C64::new(0.0, 0.0);
        for t in self.terms {
            let wdim = 1usize << t.width;
            let shift = n - t.start - t.width;
            let wb = (idx >> shift) & (wdim - 1);
            let base = idx & !((wdim - 1) << shift);
            for w in 0..wdim {
                acc += t.h[[wb, w]] * v[base | (w << shift)];
            }
        }
        acc
    }
}

impl HermitianOp for SumOp<'_> {
    fn dim(&self) -> usize {
        1 << self.n_sites
    }

    fn apply(&self, v: &[C64], out: &mut [C64]) {
        if out.len() >= (1 << 12) {
            out.par_iter_mut()
                .enumerate()
                .for_each(|(idx, o)| *o += self.accumulate(idx, v));
        } else {
            for (idx, o) in out.iter_mut().enumerate() {
                *o += self.accumulate(idx, v);
            }
        }
    }
}

/// Bottom of the parent-Hamiltonian spectrum.
#[derive(Debug, Clone, Copy)]
pub struct GapInfo {
    pub ground_energy: f64,
    /// Distance from the ground energy to the next eigenvalue.
    pub gap: f64,
    /// Eigenvalues within `1e-6` of the ground energy. Anything above 1
    /// means the windows do not single out one state.
    pub degeneracy: usize,
}

/// Ground energy, gap, and ground degeneracy of H = sum_i h_i on n sites.
/// Dense below 2^10; restarted Lanczos with deflation above.
pub fn spectral_gap(terms: &[WindowProjectorTerm], n_sites: usize) -> Result<GapInfo> {
    if terms.is_empty() {
        return Err(Error::invalid("no projector terms supplied"));
    }
    if n_sites > 16 {
        return Err(Error::SizeLimit(format!("gap solve limited to 16 sites, got {n_sites}")));
    }
    for t in terms {
        if t.start + t.width > n_sites {
            return Err(Error::invalid(format!(
                "window [{}, {}) exceeds {n_sites} sites",
                t.start,
                t.start + t.width
            )));
        }
    }
    let op = SumOp { n_sites, terms };
    let evals = if op.dim() <= DENSE_DIM {
        dense_low_eigenvalues(&op)?
    } else {
        sparse_low_eigenvalues(&op)?
    };
    let e0 = evals[0];
    let degeneracy = evals.iter().take_while(|&&e| e - e0 <= DEGENERACY_TOL).count();
    Ok(GapInfo { ground_energy: e0, gap: evals[1] - e0, degeneracy })
}

fn dense_low_eigenvalues(op: &SumOp) -> Result<Vec<f64>> {
    let dim = op.dim();
    let mut h = Array2::<C64>::zeros((dim, dim));
    let mut unit = vec![C64::new(0.0, 0.0); dim];
    let mut col = vec![C64::new(0.0, 0.0); dim];
    for j in 0..dim {
        unit[j] = C64::new(1.0, 0.0);
        col.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        op.apply(&unit, &mut col);
        unit[j] = C64::new(0.0, 0.0);
        for i in 0..dim {
            h[[i, j]] = col[i];
        }
    }
    let evals = h.eigvalsh(UPLO::Lower)?;
    Ok(evals.to_vec())
}

fn sparse_low_eigenvalues(op: &SumOp) -> Result<Vec<f64>> {
    // Four pairs resolve degeneracies up to the point where the
    // certificate is void anyway; the spread stop ends the search as soon
    // as the bottom of the spectrum is bracketed.
    let pairs = lowest_eigenpairs(op, 4.min(op.dim()), DEGENERACY_TOL, 1e-8, 0x63657274)?;
    if pairs.len() < 2 {
        return Err(Error::NonConvergence("fewer than two eigenpairs converged".into()));
    }
    Ok(pairs.into_iter().map(|(e, _)| e).collect())
}

/// Fidelity lower bound between the certified state and whatever produced
/// the measured window reductions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    /// max(0, 1 - energy/gap) when valid, 0 otherwise.
    pub f_c: f64,
    pub gap: f64,
    pub ground_energy: f64,
    pub degeneracy: usize,
    /// Sum of per-window energies, each floored at zero.
    pub energy: f64,
    pub per_window_energy: Vec<f64>,
    /// Spread of f_c under Gaussian resampling of the stored Pauli means;
    /// 0 when `n_boot` < 2 or the estimates carry no standard errors.
    pub bootstrap_stderr: f64,
    pub n_boot: usize,
    pub k: usize,
    pub bond_dim: usize,
    /// Unique ground state, positive gap, and the estimate annihilated to
    /// tolerance; when false the bound is vacuous and f_c = 0.
    pub valid: bool,
    /// Weight of the estimate outside its own window supports.
    pub mps_energy: f64,
    /// Windows whose measured energy came out negative and was clipped.
    pub clipped_windows: usize,
    /// Windows whose support threshold fell inside the eigenvalue spectrum.
    pub straddling_windows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CertSerde {
    format: String,
    #[serde(flatten)]
    cert: Certificate,
}

impl Certificate {
    pub fn to_json(&self) -> Result<String> {
        let doc = CertSerde { format: FORMAT.to_string(), cert: self.clone() };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Certificate> {
        let doc: CertSerde = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::format(format!(
                "expected format {FORMAT}, got {}",
                doc.format
            )));
        }
        Ok(doc.cert)
    }
}

/// Evaluates the bound: per-window energies of the measured reductions
/// against the projector terms, f_c = max(0, 1 - E/gap), plus a bootstrap
/// error bar from `n_boot` Gaussian resamples of the stored Pauli means.
pub fn certificate(
    mps: &Mps,
    terms: &[WindowProjectorTerm],
    estimates: &[WindowEstimate],
    gap: &GapInfo,
    n_boot: usize,
    seed: u64,
) -> Result<Certificate> {
    if terms.is_empty() || estimates.len() != terms.len() {
        return Err(Error::invalid(format!(
            "{} estimates do not match {} projector terms",
            estimates.len(),
            terms.len()
        )));
    }
    let k = terms[0].width;
    for (t, e) in terms.iter().zip(estimates) {
        if t.width != k || e.window_len != k || e.window_start != t.start {
            return Err(Error::invalid("estimate windows must align with projector terms"));
        }
    }

    let mps_energy: f64 = terms.iter().map(|t| t.mps_energy).sum();
    let valid = gap.degeneracy == 1 && gap.gap > 0.0 && mps_energy <= ANNIHILATION_TOL;

    let mut per_window = Vec::with_capacity(terms.len());
    let mut clipped = 0usize;
    for (t, e) in terms.iter().zip(estimates) {
        // Unprojected inversion of the stored means: the resulting energy is
        // an unbiased estimate of the true window energy, where the cone
        // projection behind `e.rho` would shift it upward under shot noise.
        let raw_mat = linear_inversion(&e.pauli_means, t.width)?;
        let raw = trace_product(&raw_mat, &t.h).re;
        // Rounding dust below resolution does not count as a clipped window.
        if raw < -1e-12 {
            clipped += 1;
        }
        per_window.push(raw.max(0.0));
    }
    let energy: f64 = per_window.iter().sum();
    let f_c = if valid { (1.0 - energy / gap.gap).max(0.0) } else { 0.0 };

    let bootstrap_stderr = if n_boot >= 2 {
        let replicates: Vec<f64> = (0..n_boot)
            .into_par_iter()
            .map(|b| {
                bootstrap_replicate(terms, estimates, gap, valid, derive_seed(seed, "boot", &[b as u64]))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = replicates.iter().sum::<f64>() / n_boot as f64;
        let var = replicates.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };

    Ok(Certificate {
        f_c,
        gap: gap.gap,
        ground_energy: gap.ground_energy,
        degeneracy: gap.degeneracy,
        energy,
        per_window_energy: per_window,
        bootstrap_stderr,
        n_boot,
        k,
        bond_dim: mps.max_bond_dim(),
        valid,
        mps_energy,
        clipped_windows: clipped,
        straddling_windows: terms.iter().filter(|t| t.straddling).count(),
        config: None,
    })
}

/// One bootstrap replicate: every stored Pauli mean is shifted by a
/// N(0, stderr^2) draw, the window matrices are rebuilt, and the bound is
/// re-evaluated against the fixed projector terms with the same
/// unprojected-inversion estimator as the reported value.
fn bootstrap_replicate(
    terms: &[WindowProjectorTerm],
    estimates: &[WindowEstimate],
    gap: &GapInfo,
    valid: bool,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut energy = 0.0;
    for (t, e) in terms.iter().zip(estimates) {
        let mut means = BTreeMap::new();
        for (word, &m) in &e.pauli_means {
            let s = e.pauli_stderrs.get(word).copied().unwrap_or(0.0);
            means.insert(word.clone(), m + standard_normal(&mut rng) * s);
        }
        let raw = linear_inversion(&means, t.width)?;
        energy += trace_product(&raw, &t.h).re.max(0.0);
    }
    Ok(if valid { (1.0 - energy / gap.gap).max(0.0) } else { 0.0 })
}

/// tr(a b) without forming the product.
fn trace_product(a: &Array2<C64>, b: &Array2<C64>) -> C64 {
    let d = a.nrows();
    let mut tr = C64::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            tr += a[[i, j]] * b[[j, i]];
        }
    }
    tr
}

/// Box-Muller standard normal; the log argument stays in (0, 1].
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Knobs for the one-call certification pipeline.
#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub support_tol: f64,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions { support_tol: DEFAULT_SUPPORT_TOL, n_boot: 100, seed: 7 }
    }
}

/// Parent Hamiltonian, gap, and bound in one call. The window width is
/// taken from the estimates.
pub fn certify(mps: &Mps, estimates: &[WindowEstimate], opts: &CertifyOptions) -> Result<Certificate> {
    if estimates.is_empty() {
        return Err(Error::invalid("no window estimates supplied"));
    }
    let k = estimates[0].window_len;
    let terms = parent_hamiltonian(mps, k, opts.support_tol)?;
    let gap = spectral_gap(&terms, mps.n_sites())?;
    certificate(mps, &terms, estimates, &gap, opts.n_boot, opts.seed)
}

/// Exact overlap between the certified state and the true (possibly
/// locally depolarized) evolved state; the desk-scale check of the bound.
pub fn true_fidelity_oracle(
    mps: &Mps,
    spec: &ChainSpec,
    initial: &ProductState,
    t: f64,
    noise: &NoiseModel,
) -> Result<f64> {
    if mps.n_sites() != spec.n_sites {
        return Err(Error::invalid(format!(
            "state has {} sites but the chain has {}",
            mps.n_sites(),
            spec.n_sites
        )));
    }
    if spec.n_sites > 16 {
        return Err(Error::SizeLimit("fidelity oracle limited to 16 sites".into()));
    }
    let state = evolve_exact(spec, initial, t)?;
    let psi = mps.normalized()?.to_statevector()?.to_full();
    if noise.p_local == 0.0 {
        let full = state.to_full();
        let overlap: C64 = full.iter().zip(psi.iter()).map(|(a, b)| b.conj() * a).sum();
        Ok(overlap.norm_sqr())
    } else {
        let rho = depolarize(&density_from_state(&state)?, noise.p_local)?;
        rho.fidelity_with_pure(&psi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exactsim::{exact_local_reductions, StateVector};
    use crate::localtomo::{estimate_all_reductions, exact_window_estimates};
    use crate::measure::{run_campaign, schedule_settings};
    use crate::reconstruct::reconstruct_variational;
    use crate::spinmodel::neel_state;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn quench_spec(n: usize) -> ChainSpec {
        ChainSpec::power_law(n, 1.6, 1.0, 0.0).unwrap()
    }

    #[test]
    fn window_terms_are_projectors_annihilating_the_state() {
        // Bond dimension 2 keeps every width-3 window reduction rank-deficient,
        // so supports separate cleanly from exact zeros.
        let mps = Mps::random(6, 2, 3).unwrap().normalized().unwrap();
        let terms = parent_hamiltonian(&mps, 3, 1e-7).unwrap();
        assert_eq!(terms.len(), 4);
        for (i, term) in terms.iter().enumerate() {
            assert_eq!(term.start, i);
            let h2 = term.h.dot(&term.h);
            let dev = (&h2 - &term.h).iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(dev < 1e-8, "window {i}: h^2 deviates from h by {dev:e}");
            let direct = mps.window_reduction(i, 3).unwrap().expectation(&term.h).re;
            assert!(direct.abs() <= 1e-8, "window {i} energy {direct:e}");
            assert!((term.mps_energy - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn depolarized_neel_certificate_matches_closed_form() {
        let n = 4;
        let p = 0.1;
        let neel = neel_state(n).unwrap();
        let mps = Mps::from_basis_product(&neel);
        let state = StateVector::from_product(&neel, false).unwrap();
        let noisy: Vec<_> = exact_local_reductions(&state, 1)
            .unwrap()
            .iter()
            .map(|r| depolarize(r, p).unwrap())
            .collect();
        let estimates = exact_window_estimates(&noisy).unwrap();
        let terms = parent_hamiltonian(&mps, 1, 1e-7).unwrap();
        let gap = spectral_gap(&terms, n).unwrap();
        assert_eq!(gap.degeneracy, 1);
        assert_abs_diff_eq!(gap.ground_energy, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(gap.gap, 1.0, epsilon = 1e-10);
        let cert = certificate(&mps, &terms, &estimates, &gap, 0, 7).unwrap();
        assert!(cert.valid);
        for &e in &cert.per_window_energy {
            assert_abs_diff_eq!(e, p / 2.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(cert.f_c, 0.8, epsilon = 1e-10);

        let truth =
            true_fidelity_oracle(&mps, &quench_spec(n), &neel, 0.0, &NoiseModel::new(p).unwrap())
                .unwrap();
        assert_abs_diff_eq!(truth, (1.0 - p / 2.0).powi(4), epsilon = 1e-10);
        assert!(cert.f_c <= truth + 1e-8);
    }

    #[test]
    fn ghz_window_supports_leave_a_degenerate_ground_space() {
        let n = 4;
        let dim = 1usize << n;
        let mut amps = Array1::<C64>::zeros(dim);
        amps[0] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        amps[dim - 1] = amps[0];
        let state = StateVector::from_full(n, amps).unwrap();
        let mps = Mps::from_statevector(&state, 1e-14).unwrap();
        let terms = parent_hamiltonian(&mps, 2, 1e-7).unwrap();
        for term in &terms {
            assert!(term.mps_energy <= 1e-12);
        }
        let gap = spectral_gap(&terms, n).unwrap();
        assert_eq!(gap.degeneracy, 2);
        let estimates = exact_window_estimates(&mps.local_reductions(2).unwrap()).unwrap();
        let cert = certificate(&mps, &terms, &estimates, &gap, 0, 7).unwrap();
        assert!(!cert.valid);
        assert_eq!(cert.f_c, 0.0);
    }

    #[test]
    fn certifying_a_state_against_its_own_reductions_gives_unit_bound() {
        let mps = Mps::random(6, 2, 11).unwrap().normalized().unwrap();
        let estimates = exact_window_estimates(&mps.local_reductions(3).unwrap()).unwrap();
        let opts = CertifyOptions { n_boot: 0, ..Default::default() };
        let cert = certify(&mps, &estimates, &opts).unwrap();
        assert!(cert.valid, "gap {} degeneracy {} ann {:e}", cert.gap, cert.degeneracy, cert.mps_energy);
        assert!(cert.f_c > 1.0 - 1e-8, "f_c = {}", cert.f_c);
        assert!(cert.f_c <= 1.0);
        assert_eq!(cert.clipped_windows, 0);
    }

    #[test]
    fn bound_never_exceeds_true_fidelity_on_exact_inputs() {
        let cases = [(4usize, 0.0f64, 0.3f64), (4, 0.1, 0.5), (6, 0.05, 0.25), (6, 0.0, 0.6)];
        for &(n, p, t) in &cases {
            let spec = quench_spec(n);
            let neel = neel_state(n).unwrap();
            let state = evolve_exact(&spec, &neel, t).unwrap();
            let mut reductions = exact_local_reductions(&state, 3).unwrap();
            if p > 0.0 {
                reductions = reductions.iter().map(|r| depolarize(r, p).unwrap()).collect();
            }
            let estimates = exact_window_estimates(&reductions).unwrap();
            let recon = reconstruct_variational(&estimates, &ReconstructionOptions::for_width(3))
                .unwrap();
            let opts = CertifyOptions { n_boot: 0, ..Default::default() };
            let cert = certify(&recon.mps, &estimates, &opts).unwrap();
            let truth =
                true_fidelity_oracle(&recon.mps, &spec, &neel, t, &NoiseModel::new(p).unwrap())
                    .unwrap();
            assert!(
                cert.f_c <= truth + 1e-8,
                "n={n} p={p} t={t}: f_c={} exceeds true fidelity {}",
                cert.f_c,
                truth
            );
        }
    }

    #[test]
    fn sparse_and_dense_gap_paths_agree() {
        let mps = Mps::random(6, 2, 3).unwrap().normalized().unwrap();
        let terms = parent_hamiltonian(&mps, 3, 1e-7).unwrap();
        let op = SumOp { n_sites: 6, terms: &terms };
        let dense = dense_low_eigenvalues(&op).unwrap();
        let sparse = sparse_low_eigenvalues(&op).unwrap();
        assert_abs_diff_eq!(dense[0], sparse[0], epsilon = 1e-7);
        assert_abs_diff_eq!(dense[1], sparse[1], epsilon = 1e-7);
    }

    #[test]
    fn bootstrap_spread_is_deterministic_and_tracks_shot_noise() {
        let n = 4;
        let spec = quench_spec(n);
        let state = evolve_exact(&spec, &neel_state(n).unwrap(), 0.4).unwrap();
        let settings = schedule_settings(n, 3).unwrap();
        let records = run_campaign(&state, &settings, 800, 5, &NoiseModel::none()).unwrap();
        let estimates = estimate_all_reductions(&records, 3).unwrap();
        let recon =
            reconstruct_variational(&estimates, &ReconstructionOptions::for_width(3)).unwrap();
        let opts = CertifyOptions { n_boot: 40, seed: 21, ..Default::default() };
        let a = certify(&recon.mps, &estimates, &opts).unwrap();
        let b = certify(&recon.mps, &estimates, &opts).unwrap();
        assert!(a.valid);
        assert_eq!(a.bootstrap_stderr, b.bootstrap_stderr);
        assert!(a.bootstrap_stderr > 0.0);

        // Exact inputs carry zero stderr; identical replicates leave only the
        // rounding of the replicate mean.
        let exact = exact_window_estimates(&recon.mps.local_reductions(3).unwrap()).unwrap();
        let cert = certify(&recon.mps, &exact, &opts).unwrap();
        assert!(cert.bootstrap_stderr < 1e-12, "stderr {:e}", cert.bootstrap_stderr);
    }

    #[test]
    fn certificate_round_trips_through_json() {
        let neel = neel_state(4).unwrap();
        let mps = Mps::from_basis_product(&neel);
        let estimates = exact_window_estimates(&mps.local_reductions(1).unwrap()).unwrap();
        let opts = CertifyOptions { n_boot: 8, ..Default::default() };
        let cert = certify(&mps, &estimates, &opts).unwrap();
        let text = cert.to_json().unwrap();
        let back = Certificate::from_json(&text).unwrap();
        assert_eq!(cert, back);
        assert!(Certificate::from_json(&text.replace("cert-v1", "cert-v9")).is_err());
    }

    #[test]
    fn certifiable_caps_pin_every_site_through_deficient_windows() {
        // Straddling windows under the even-k tiling stay full rank by design;
        // what matters is that rank-deficient windows cover every site.
        for k in 1..=5usize {
            for n in k.max(2)..=12 {
                let caps = certifiable_bond_caps(n, k).unwrap();
                assert_eq!(caps.len(), n - 1);
                let rank_bound = |start: usize| {
                    let left = if start == 0 { 1 } else { caps[start - 1] };
                    let right = if start + k == n { 1 } else { caps[start + k - 1] };
                    left * right
                };
                let mut covered = vec![false; n];
                for start in 0..=n - k {
                    if rank_bound(start) < 1 << k {
                        for c in covered.iter_mut().skip(start).take(k) {
                            *c = true;
                        }
                    }
                }
                assert!(covered.iter().all(|&c| c), "k={k} n={n}: site without a pinning window");
                if k % 2 == 1 {
                    for start in 0..=n - k {
                        assert!(rank_bound(start) < 1 << k, "k={k} n={n} window {start}");
                    }
                }
            }
        }
        assert_eq!(certifiable_bond_caps(8, 3).unwrap(), vec![2; 7]);
        assert_eq!(certifiable_bond_caps(8, 2).unwrap(), vec![2, 1, 2, 1, 2, 1, 2]);
        assert_eq!(certifiable_bond_caps(9, 4).unwrap(), vec![2, 4, 2, 1, 2, 4, 2, 1]);
        assert!(certifiable_bond_caps(1, 1).is_err());
        assert!(certifiable_bond_caps(6, 7).is_err());
    }

    #[test]
    fn capped_quench_reconstruction_yields_a_unique_ground_state() {
        let n = 6;
        let spec = quench_spec(n);
        let neel = neel_state(n).unwrap();
        let t = 0.25;
        let state = evolve_exact(&spec, &neel, t).unwrap();
        let reductions = exact_local_reductions(&state, 3).unwrap();
        let estimates = exact_window_estimates(&reductions).unwrap();
        let opts = certifiable_recon_options(n, 3).unwrap();
        let recon = reconstruct_variational(&estimates, &opts).unwrap();
        assert!(recon.mps.bond_dims().iter().all(|&d| d <= 2));
        let cert =
            certify(&recon.mps, &estimates, &CertifyOptions { n_boot: 0, ..Default::default() })
                .unwrap();
        assert!(cert.valid, "degeneracy {} gap {}", cert.degeneracy, cert.gap);
        assert_eq!(cert.degeneracy, 1);
        let truth = true_fidelity_oracle(&recon.mps, &spec, &neel, t, &NoiseModel::none()).unwrap();
        assert!(cert.f_c > 0.5 && cert.f_c <= truth + 1e-8, "f_c {} truth {truth}", cert.f_c);
    }
}

