//! Matrix product states: canonical forms, compression, reductions,
//! expectation values, and Schmidt spectra.
//!
//! Tensors are rank 3 with shape (left bond, 2, right bond); boundary bonds
//! have dimension 1. Canonicalization and truncation go through SVDs, which
//! also trims bond dimensions that exceed what the surrounding chain can
//! support.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use ndarray_linalg::{JobSvd, SVDDC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactsim::{DensityMatrix, StateVector};
use crate::pauli::Pauli;
use crate::spinmodel::ProductState;
use crate::C64;

const FORMAT: &str = "mps-v1";
/// Relative singular-value floor used when no explicit tolerance applies.
const RANK_EPS: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct Mps {
    tensors: Vec<Array3<C64>>,
    /// Site whose tensor carries the norm: everything left of it is
    /// left-isometric and everything right of it right-isometric.
    canonical_center: Option<usize>,
}

impl Mps {
    /// Wraps raw tensors; `canonical_center` is the caller's promise and is
    /// only checked for range.
    pub fn from_tensors(
        tensors: Vec<Array3<C64>>,
        canonical_center: Option<usize>,
    ) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::invalid("matrix product state needs at least one site"));
        }
        if tensors[0].dim().0 != 1 || tensors.last().expect("nonempty").dim().2 != 1 {
            return Err(Error::invalid("boundary bond dimensions must be 1"));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.dim().1 != 2 {
                return Err(Error::invalid(format!("site {i} physical dimension must be 2")));
            }
            if i + 1 < tensors.len() && t.dim().2 != tensors[i + 1].dim().0 {
                return Err(Error::invalid(format!("bond mismatch between sites {i} and {}", i + 1)));
            }
            if t.dim().0 == 0 || t.dim().2 == 0 {
                return Err(Error::invalid("bond dimensions must be positive"));
            }
        }
        if let Some(c) = canonical_center {
            if c >= tensors.len() {
                return Err(Error::invalid("canonical center out of range"));
            }
        }
        Ok(Mps { tensors, canonical_center })
    }

    /// Product state from per-site local vectors (each normalized here).
    pub fn product_state(locals: &[[C64; 2]]) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::invalid("product state needs at least one site"));
        }
        let tensors = locals
            .iter()
            .map(|v| {
                let norm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
                if norm == 0.0 {
                    return Err(Error::invalid("local vector must be nonzero"));
                }
                let mut t = Array3::zeros((1, 2, 1));
                t[[0, 0, 0]] = v[0] / norm;
                t[[0, 1, 0]] = v[1] / norm;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mps { tensors, canonical_center: Some(0) })
    }

    pub fn from_basis_product(p: &ProductState) -> Self {
        let locals: Vec<[C64; 2]> = p
            .bits()
            .iter()
            .map(|&b| {
                if b == 0 {
                    [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
                } else {
                    [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
                }
            })
            .collect();
        Mps::product_state(&locals).expect("basis product state is well formed")
    }

    /// Random normalized state with bonds capped at `max_bond`.
    pub fn random(n_sites: usize, max_bond: usize, seed: u64) -> Result<Self> {
        Mps::random_with_caps(n_sites, &vec![max_bond; n_sites.saturating_sub(1)], seed)
    }

    /// Random normalized state with an individual cap per interior bond;
    /// `caps[i]` limits the bond between sites i and i+1.
    pub fn random_with_caps(n_sites: usize, caps: &[usize], seed: u64) -> Result<Self> {
        if n_sites == 0 {
            return Err(Error::invalid("need at least one site"));
        }
        if caps.len() + 1 != n_sites || caps.contains(&0) {
            return Err(Error::invalid("need one positive cap per interior bond"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim_at = |i: usize| -> usize {
            let left = 1usize << i.min(30);
            let right = 1usize << (n_sites - i).min(30);
            let cap = if i == 0 || i == n_sites { usize::MAX } else { caps[i - 1] };
            cap.min(left).min(right)
        };
        let tensors = (0..n_sites)
            .map(|i| {
                let (dl, dr) = (dim_at(i), dim_at(i + 1));
                let mut t = Array3::zeros((dl, 2, dr));
                for z in t.iter_mut() {
                    *z = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
                t
            })
            .collect();
        Mps { tensors, canonical_center: None }.normalized()
    }

    /// Factorizes a state vector by successive SVDs. The squared overlap
    /// with the input is at least 1 - tol; `tol = 0` keeps full rank.
    pub fn from_statevector(state: &StateVector, tol: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tol) {
            return Err(Error::invalid("tolerance must lie in [0, 1)"));
        }
        let n = state.n_sites();
        let full = state.to_full();
        let cut_budget = if n > 1 { tol / (n - 1) as f64 } else { 0.0 };
        let mut tensors: Vec<Array3<C64>> = Vec::with_capacity(n);
        // Remaining amplitudes viewed as (rank * 2, rest).
        let mut rank = 1usize;
        let mut rest = full.into_shape_with_order((2, 1usize << (n - 1)))?.to_owned();
        for _site in 0..n - 1 {
            let (u, s, vt) = thin_svd(&rest.view())?;
            let keep = choose_rank(&s, usize::MAX, cut_budget);
            let u = u.slice(ndarray::s![.., ..keep]).to_owned();
            tensors.push(u.into_shape_with_order((rank, 2, keep))?.to_owned());
            let mut carry = vt.slice(ndarray::s![..keep, ..]).to_owned();
            for (i, mut row) in carry.outer_iter_mut().enumerate() {
                row.mapv_inplace(|z| z * s[i]);
            }
            rank = keep;
            let cols = carry.ncols();
            rest = carry.into_shape_with_order((rank * 2, cols / 2))?.to_owned();
        }
        tensors.push(rest.into_shape_with_order((rank, 2, 1))?.to_owned());
        let mps = Mps { tensors, canonical_center: Some(n - 1) };
        mps.normalized()
    }

    /// Dense state vector over the full basis; the result is normalized.
    pub fn to_statevector(&self) -> Result<StateVector> {
        let n = self.n_sites();
        let mut acc: Array2<C64> = Array2::ones((1, 1));
        for t in &self.tensors {
            let (dl, _, dr) = t.dim();
            let flat = t.view().into_shape_with_order((dl, 2 * dr))?.to_owned();
            let prod = acc.dot(&flat); // (rows, 2*dr)
            let rows = prod.nrows();
            acc = prod.into_shape_with_order((rows * 2, dr))?.to_owned();
        }
        let amps = acc.into_shape_with_order(1 << n)?.to_owned();
        let norm: f64 = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("zero matrix product state"));
        }
        StateVector::from_full(n, amps / C64::new(norm, 0.0))
    }

    pub fn n_sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &[Array3<C64>] {
        &self.tensors
    }

    pub fn canonical_center(&self) -> Option<usize> {
        self.canonical_center
    }

    /// Bond dimensions, length n_sites + 1 including the unit boundaries.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.tensors.iter().map(|t| t.dim().0).collect();
        dims.push(1);
        dims
    }

    pub fn max_bond_dim(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Gauge transformation to mixed-canonical form around `center`.
    /// Preserves the state (including its norm) and trims numerically
    /// vanishing singular values.
    pub fn canonicalize(&self, center: usize) -> Result<Mps> {
        let n = self.n_sites();
        if center >= n {
            return Err(Error::invalid("canonical center out of range"));
        }
        let mut tensors = self.tensors.clone();
        for i in 0..center {
            let (dl, _, dr) = tensors[i].dim();
            let m = tensors[i].view().into_shape_with_order((dl * 2, dr))?.to_owned();
            let (u, s, vt) = thin_svd(&m.view())?;
            let keep = choose_rank(&s, usize::MAX, 0.0);
            let u = u.slice(ndarray::s![.., ..keep]).to_owned();
            tensors[i] = u.into_shape_with_order((dl, 2, keep))?.to_owned();
            let mut carry = vt.slice(ndarray::s![..keep, ..]).to_owned();
            for (r, mut row) in carry.outer_iter_mut().enumerate() {
                row.mapv_inplace(|z| z * s[r]);
            }
            tensors[i + 1] = absorb_from_left(&carry, &tensors[i + 1])?;
        }
        for i in (center + 1..n).rev() {
            let (dl, _, dr) = tensors[i].dim();
            let m = tensors[i].view().into_shape_with_order((dl, 2 * dr))?.to_owned();
            let (u, s, vt) = thin_svd(&m.view())?;
            let keep = choose_rank(&s, usize::MAX, 0.0);
            let vt = vt.slice(ndarray::s![..keep, ..]).to_owned();
            tensors[i] = vt.into_shape_with_order((keep, 2, dr))?.to_owned();
            let mut carry = u.slice(ndarray::s![.., ..keep]).to_owned();
            for (c, mut col) in carry.columns_mut().into_iter().enumerate() {
                col.mapv_inplace(|z| z * s[c]);
            }
            tensors[i - 1] = absorb_from_right(&tensors[i - 1], &carry)?;
        }
        Ok(Mps { tensors, canonical_center: Some(center) })
    }

    /// Same state scaled to unit norm, canonicalized around the previous
    /// center (or site 0).
    pub fn normalized(&self) -> Result<Mps> {
        let center = self.canonical_center.unwrap_or(0);
        let mut m = self.canonicalize(center)?;
        let norm: f64 = m.tensors[center].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize the zero state"));
        }
        m.tensors[center].mapv_inplace(|z| z / norm);
        Ok(m)
    }

    pub fn norm(&self) -> f64 {
        let mut env: Array2<C64> = Array2::ones((1, 1));
        for t in &self.tensors {
            env = left_transfer(&env, t);
        }
        env[[0, 0]].re.max(0.0).sqrt()
    }

    /// <self|other>, not normalized.
    pub fn overlap(&self, other: &Mps) -> Result<C64> {
        if self.n_sites() != other.n_sites() {
            return Err(Error::invalid("states live on different chains"));
        }
        let mut env: Array2<C64> = Array2::ones((1, 1));
        for (a, b) in self.tensors.iter().zip(other.tensors.iter()) {
            // env[abra, aket] -> sum_s conj(A[s])^T env B[s]
            let mut next: Array2<C64> = Array2::zeros((a.dim().2, b.dim().2));
            for s in 0..2 {
                let abra = a.index_axis(ndarray::Axis(1), s).mapv(|z| z.conj());
                let bket = b.index_axis(ndarray::Axis(1), s);
                next = next + abra.t().dot(&env).dot(&bket);
            }
            env = next;
        }
        Ok(env[[0, 0]])
    }

    /// Expectation of a sparse Pauli word given as (site, letter) pairs,
    /// normalized by <self|self>. Sites must be strictly increasing.
    pub fn expectation_pauli_sites(&self, ops: &[(usize, Pauli)]) -> Result<f64> {
        let n = self.n_sites();
        if ops.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("operator sites must be strictly increasing"));
        }
        if ops.last().is_some_and(|&(s, _)| s >= n) {
            return Err(Error::invalid("operator site out of range"));
        }
        let mut env: Array2<C64> = Array2::ones((1, 1));
        let mut norm_env: Array2<C64> = Array2::ones((1, 1));
        let mut next_op = 0usize;
        for (site, t) in self.tensors.iter().enumerate() {
            let letter = if next_op < ops.len() && ops[next_op].0 == site {
                let p = ops[next_op].1;
                next_op += 1;
                Some(p)
            } else {
                None
            };
            env = match letter {
                None => left_transfer(&env, t),
                Some(p) => {
                    // Same (ket, bra) index order as left_transfer, with the
                    // letter inserted on the bra side.
                    let m = p.matrix();
                    let mut next: Array2<C64> = Array2::zeros((t.dim().2, t.dim().2));
                    for sp in 0..2 {
                        let bra = t.index_axis(ndarray::Axis(1), sp).mapv(|z| z.conj());
                        for s in 0..2 {
                            if m[[sp, s]] == C64::new(0.0, 0.0) {
                                continue;
                            }
                            let ket = t.index_axis(ndarray::Axis(1), s);
                            next = next + ket.t().dot(&env).dot(&bra).mapv(|z| z * m[[sp, s]]);
                        }
                    }
                    next
                }
            };
            norm_env = left_transfer(&norm_env, t);
        }
        let norm_sq = norm_env[[0, 0]].re;
        if norm_sq <= 0.0 {
            return Err(Error::invalid("zero-norm state has no expectation values"));
        }
        Ok(env[[0, 0]].re / norm_sq)
    }

    /// Expectation of a full-length Pauli word.
    pub fn expectation_pauli(&self, word: &[Pauli]) -> Result<f64> {
        if word.len() != self.n_sites() {
            return Err(Error::invalid("Pauli word length must match chain length"));
        }
        let ops: Vec<(usize, Pauli)> = word
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != Pauli::I)
            .map(|(s, &p)| (s, p))
            .collect();
        self.expectation_pauli_sites(&ops)
    }

    /// Reduced density matrix of the contiguous window starting at `start`,
    /// `k` sites wide, normalized to unit trace.
    pub fn window_reduction(&self, start: usize, k: usize) -> Result<DensityMatrix> {
        let n = self.n_sites();
        if k == 0 || k > 8 {
            return Err(Error::invalid("window width must lie in 1..=8"));
        }
        if start + k > n {
            return Err(Error::invalid("window exceeds chain"));
        }
        let mut el: Array2<C64> = Array2::ones((1, 1));
        for t in &self.tensors[..start] {
            el = left_transfer(&el, t);
        }
        let mut er: Array2<C64> = Array2::ones((1, 1));
        for t in self.tensors[start + k..].iter().rev() {
            er = right_transfer(t, &er);
        }
        let raw = window_matrix(&self.tensors[start..start + k], &el, &er)?;
        Ok(DensityMatrix::new_unchecked(raw))
    }

    /// All contiguous k-site reductions, sharing transfer environments.
    pub fn local_reductions(&self, k: usize) -> Result<Vec<DensityMatrix>> {
        Ok(self
            .local_reductions_raw(k)?
            .into_iter()
            .map(DensityMatrix::new_unchecked)
            .collect())
    }

    /// Unit-trace window reductions as raw matrices (hot path for the
    /// reconstruction cost function).
    pub(crate) fn local_reductions_raw(&self, k: usize) -> Result<Vec<Array2<C64>>> {
        let n = self.n_sites();
        if k == 0 || k > 8 {
            return Err(Error::invalid("window width must lie in 1..=8"));
        }
        if k > n {
            return Err(Error::invalid("window exceeds chain"));
        }
        let lefts = left_environments(&self.tensors);
        let rights = right_environments(&self.tensors);
        (0..=n - k)
            .map(|w| {
                let mut raw =
                    window_matrix(&self.tensors[w..w + k], &lefts[w], &rights[w + k])?;
                let trace: f64 = (0..raw.nrows()).map(|i| raw[[i, i]].re).sum();
                if trace <= 0.0 {
                    return Err(Error::invalid("window reduction has nonpositive trace"));
                }
                raw.mapv_inplace(|z| z / trace);
                Ok(raw)
            })
            .collect()
    }

    /// Truncates every bond to `max_bond`, additionally dropping relative
    /// squared Schmidt weight up to `tol` per cut. Returns the normalized
    /// result and the total relative squared weight discarded.
    pub fn compress(&self, max_bond: usize, tol: f64) -> Result<(Mps, f64)> {
        if max_bond == 0 {
            return Err(Error::invalid("bond cap must be at least 1"));
        }
        if !(0.0..1.0).contains(&tol) {
            return Err(Error::invalid("tolerance must lie in [0, 1)"));
        }
        let n = self.n_sites();
        let mut m = self.canonicalize(0)?;
        let mut discarded = 0.0f64;
        for i in 0..n - 1 {
            let (dl, _, dr) = m.tensors[i].dim();
            let merged = m.tensors[i].view().into_shape_with_order((dl * 2, dr))?.to_owned();
            let (u, s, vt) = thin_svd(&merged.view())?;
            let total: f64 = s.iter().map(|x| x * x).sum();
            let keep = choose_rank(&s, max_bond, tol);
            let kept: f64 = s.iter().take(keep).map(|x| x * x).sum();
            if total > 0.0 {
                discarded += (total - kept) / total;
            }
            let u = u.slice(ndarray::s![.., ..keep]).to_owned();
            m.tensors[i] = u.into_shape_with_order((dl, 2, keep))?.to_owned();
            let mut carry = vt.slice(ndarray::s![..keep, ..]).to_owned();
            // Renormalize the kept weight so truncation does not shrink the
            // state ahead of the final normalization.
            let scale = if kept > 0.0 { (total / kept).sqrt() } else { 1.0 };
            for (r, mut row) in carry.outer_iter_mut().enumerate() {
                row.mapv_inplace(|z| z * s[r] * scale);
            }
            m.tensors[i + 1] = absorb_from_left(&carry, &m.tensors[i + 1])?;
        }
        m.canonical_center = Some(n - 1);
        Ok((m.normalized()?, discarded))
    }

    /// Schmidt coefficients across the bond with `sites_left` sites on the
    /// left, in descending order, normalized to unit squared sum.
    pub fn schmidt_spectrum(&self, sites_left: usize) -> Result<Vec<f64>> {
        let n = self.n_sites();
        if sites_left == 0 || sites_left >= n {
            return Err(Error::invalid("cut must leave sites on both sides"));
        }
        let m = self.canonicalize(sites_left - 1)?;
        let t = &m.tensors[sites_left - 1];
        let (dl, _, dr) = t.dim();
        let merged = t.view().into_shape_with_order((dl * 2, dr))?.to_owned();
        let (_, s, _) = thin_svd(&merged.view())?;
        let norm: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("zero state has no Schmidt spectrum"));
        }
        Ok(s.iter().map(|x| x / norm).collect())
    }

    /// Von Neumann entanglement entropy in bits across a cut.
    pub fn entanglement_entropy(&self, sites_left: usize) -> Result<f64> {
        let spectrum = self.schmidt_spectrum(sites_left)?;
        Ok(spectrum
            .iter()
            .map(|l| l * l)
            .filter(|&p| p > 1e-16)
            .map(|p| -p * p.log2())
            .sum())
    }

    /// Entropy across the middle cut (floor(n/2) sites on the left).
    pub fn half_chain_entropy(&self) -> Result<f64> {
        self.entanglement_entropy(self.n_sites() / 2)
    }

    pub fn to_json(&self) -> Result<String> {
        let ser = MpsSerde {
            format: FORMAT.to_string(),
            n_sites: self.n_sites(),
            canonical_center: self.canonical_center,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorSerde {
                    dl: t.dim().0,
                    dr: t.dim().2,
                    re: t.iter().map(|z| z.re).collect(),
                    im: t.iter().map(|z| z.im).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ser)?)
    }

    pub fn from_json(text: &str) -> Result<Mps> {
        let ser: MpsSerde =
            serde_json::from_str(text).map_err(|e| Error::format(format!("mps: {e}")))?;
        if ser.format != FORMAT {
            return Err(Error::format(format!(
                "unsupported matrix product state format {:?}, expected {FORMAT:?}",
                ser.format
            )));
        }
        if ser.tensors.len() != ser.n_sites {
            return Err(Error::format("tensor count does not match site count"));
        }
        let tensors = ser
            .tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let len = t.dl * 2 * t.dr;
                if t.re.len() != len || t.im.len() != len {
                    return Err(Error::format(format!("site {i}: element count mismatch")));
                }
                let data: Vec<C64> =
                    t.re.iter().zip(t.im.iter()).map(|(&r, &im)| C64::new(r, im)).collect();
                Array3::from_shape_vec((t.dl, 2, t.dr), data)
                    .map_err(|e| Error::format(format!("site {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Mps::from_tensors(tensors, ser.canonical_center)
    }
}

#[derive(Serialize, Deserialize)]
struct MpsSerde {
    format: String,
    n_sites: usize,
    canonical_center: Option<usize>,
    tensors: Vec<TensorSerde>,
}

#[derive(Serialize, Deserialize)]
struct TensorSerde {
    dl: usize,
    dr: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Thin SVD with a divide-and-conquer first attempt.
pub(crate) fn thin_svd(
    m: &ArrayView2<'_, C64>,
) -> Result<(Array2<C64>, Array1<f64>, Array2<C64>)> {
    let owned = m.to_owned();
    let (u, s, vt) = match owned.svddc(JobSvd::Some) {
        Ok(r) => r,
        Err(_) => {
            // gesdd can fail on ill-conditioned inputs; gesvd is slower but
            // more forgiving.
            use ndarray_linalg::SVD;
            m.to_owned().svd(true, true)?
        }
    };
    let u = u.ok_or_else(|| Error::invalid("SVD did not return U"))?;
    let vt = vt.ok_or_else(|| Error::invalid("SVD did not return V^T"))?;
    Ok((u, s, vt))
}

/// Number of singular values to keep: at most `max_rank`, dropping values
/// below the relative floor, then as many more of the smallest as fit into
/// `tol` of relative squared weight.
fn choose_rank(s: &Array1<f64>, max_rank: usize, tol: f64) -> usize {
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 1.min(s.len());
    }
    let floor = smax * RANK_EPS;
    let mut keep = s.iter().take_while(|&&x| x > floor).count().max(1);
    keep = keep.min(max_rank.max(1));
    if tol > 0.0 {
        let total: f64 = s.iter().map(|x| x * x).sum();
        let mut discarded: f64 = s.iter().skip(keep).map(|x| x * x).sum();
        while keep > 1 {
            let next = s[keep - 1] * s[keep - 1];
            if (discarded + next) / total > tol {
                break;
            }
            discarded += next;
            keep -= 1;
        }
    }
    keep
}

fn absorb_from_left(carry: &Array2<C64>, t: &Array3<C64>) -> Result<Array3<C64>> {
    let (dl, _, dr) = t.dim();
    let flat = t.view().into_shape_with_order((dl, 2 * dr))?;
    let prod = carry.dot(&flat);
    Ok(prod.into_shape_with_order((carry.nrows(), 2, dr))?.to_owned())
}

fn absorb_from_right(t: &Array3<C64>, carry: &Array2<C64>) -> Result<Array3<C64>> {
    let (dl, _, dr) = t.dim();
    let flat = t.view().into_shape_with_order((dl * 2, dr))?;
    let prod = flat.dot(carry);
    Ok(prod.into_shape_with_order((dl, 2, carry.ncols()))?.to_owned())
}

/// One left-to-right transfer step: env'[b, b'] = sum_s A[s]^T env conj(A[s]).
/// Index convention: first env index is the ket side, second the bra side.
pub(crate) fn left_transfer(env: &Array2<C64>, t: &Array3<C64>) -> Array2<C64> {
    let dr = t.dim().2;
    let mut next: Array2<C64> = Array2::zeros((dr, dr));
    for s in 0..2 {
        let ket = t.index_axis(ndarray::Axis(1), s);
        let bra = ket.mapv(|z| z.conj());
        next = next + ket.t().dot(env).dot(&bra);
    }
    next
}

/// One right-to-left transfer step: env'[a, a'] = sum_s A[s] env A[s]^dag.
pub(crate) fn right_transfer(t: &Array3<C64>, env: &Array2<C64>) -> Array2<C64> {
    let dl = t.dim().0;
    let mut next: Array2<C64> = Array2::zeros((dl, dl));
    for s in 0..2 {
        let ket = t.index_axis(ndarray::Axis(1), s);
        let bra = ket.mapv(|z| z.conj());
        next = next + ket.dot(env).dot(&bra.t());
    }
    next
}

/// All left environments: lefts[i] covers sites 0..i.
pub(crate) fn left_environments(tensors: &[Array3<C64>]) -> Vec<Array2<C64>> {
    let mut envs = Vec::with_capacity(tensors.len() + 1);
    envs.push(Array2::ones((1, 1)));
    for t in tensors {
        let last = envs.last().expect("seeded");
        envs.push(left_transfer(last, t));
    }
    envs
}

/// All right environments: rights[i] covers sites i..n.
pub(crate) fn right_environments(tensors: &[Array3<C64>]) -> Vec<Array2<C64>> {
    let n = tensors.len();
    let mut envs = vec![Array2::ones((1, 1)); n + 1];
    for i in (0..n).rev() {
        envs[i] = right_transfer(&tensors[i], &envs[i + 1]);
    }
    envs
}

/// Window product W[a, sigma, b]: all site tensors of `window` merged into
/// one rank-3 block with the combined physical index site-0-major.
pub(crate) fn window_block(window: &[Array3<C64>]) -> Result<Array3<C64>> {
    let dl = window[0].dim().0;
    // Built by absorbing one site at a time; starts as the identity with an
    // empty physical index.
    let mut acc: Array3<C64> = Array3::zeros((dl, 1, dl));
    for a in 0..dl {
        acc[[a, 0, a]] = C64::new(1.0, 0.0);
    }
    for t in window {
        let (d_in, _, d_out) = t.dim();
        let (da, dp, _) = acc.dim();
        debug_assert_eq!(acc.dim().2, d_in);
        let acc_flat = acc.into_shape_with_order((da * dp, d_in))?;
        let t_flat = t.view().into_shape_with_order((d_in, 2 * d_out))?;
        let prod = acc_flat.dot(&t_flat); // (da*dp, 2*d_out)
        acc = prod.into_shape_with_order((da, dp * 2, d_out))?.to_owned();
    }
    Ok(acc)
}

/// Unnormalized window reduction from precomputed environments:
/// rho[sigma, sigma'] = sum E_L[a, abar] W[sigma][a, b] E_R[b, bbar]
///                      conj(W[sigma'][abar, bbar]).
pub(crate) fn window_matrix(
    window: &[Array3<C64>],
    el: &Array2<C64>,
    er: &Array2<C64>,
) -> Result<Array2<C64>> {
    let acc = window_block(window)?;
    window_matrix_from_block(&acc, el, er)
}

/// Same contraction starting from a prebuilt window block.
pub(crate) fn window_matrix_from_block(
    acc: &Array3<C64>,
    el: &Array2<C64>,
    er: &Array2<C64>,
) -> Result<Array2<C64>> {
    let (da, phys, db) = acc.dim();
    // y[sigma][abar, b] = sum_a E_L[a, abar] W[sigma][a, b]
    // z[sigma][abar, bbar] = sum_b y[sigma][abar, b] E_R[b, bbar]
    // rho[sigma, sigma'] = sum z[sigma] .* conj(W[sigma'])
    let mut rho: Array2<C64> = Array2::zeros((phys, phys));
    let mut slices: Vec<Array2<C64>> = Vec::with_capacity(phys);
    let mut zs: Vec<Array2<C64>> = Vec::with_capacity(phys);
    for sigma in 0..phys {
        let w_s = acc.index_axis(ndarray::Axis(1), sigma).to_owned();
        let y = el.t().dot(&w_s);
        zs.push(y.dot(er));
        slices.push(w_s);
    }
    for sigma in 0..phys {
        for sigma_p in 0..phys {
            let mut val = C64::new(0.0, 0.0);
            for a in 0..da {
                for b in 0..db {
                    val += zs[sigma][[a, b]] * slices[sigma_p][[a, b]].conj();
                }
            }
            rho[[sigma, sigma_p]] = val;
        }
    }
    Ok(rho)
}
