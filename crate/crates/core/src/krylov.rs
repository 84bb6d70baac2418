//! Krylov-subspace kernels: Lanczos propagation of exp(-i t H) and a
//! deflated restarted Lanczos solver for the lowest eigenpairs.
//!
//! Both kernels only see an operator through [`HermitianOp`], so they serve
//! the sector Hamiltonians of the simulator and the window-projector sums of
//! the certifier alike.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::C64;

/// A Hermitian linear operator given by its action on a vector.
pub(crate) trait HermitianOp {
    fn dim(&self) -> usize;
    /// Writes `H v` into `out`; `out` arrives zeroed.
    fn apply(&self, v: &[C64], out: &mut [C64]);
}

pub(crate) fn apply_op<H: HermitianOp + ?Sized>(h: &H, v: &Array1<C64>) -> Array1<C64> {
    let mut out = Array1::zeros(v.len());
    h.apply(
        v.as_slice().expect("contiguous"),
        out.as_slice_mut().expect("contiguous"),
    );
    out
}

fn norm(v: &Array1<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dot_conj(a: &Array1<C64>, b: &Array1<C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

#[derive(Debug, Clone)]
pub(crate) struct KrylovOptions {
    pub tol: f64,
    pub max_dim: usize,
    /// Maximum recursive halvings of the time step.
    pub max_splits: u32,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions { tol: 1e-10, max_dim: 64, max_splits: 40 }
    }
}

/// Applies exp(-i t H) to `psi` within `opts.tol`, splitting the step
/// adaptively when a single Krylov space cannot reach the tolerance.
pub(crate) fn evolve_krylov<H: HermitianOp + ?Sized>(
    h: &H,
    psi: &Array1<C64>,
    t: f64,
    opts: &KrylovOptions,
) -> Result<Array1<C64>> {
    if !t.is_finite() {
        return Err(Error::invalid("evolution time must be finite"));
    }
    if psi.len() != h.dim() {
        return Err(Error::invalid("state dimension does not match operator"));
    }
    evolve_split(h, psi.clone(), t, opts, 0)
}

fn evolve_split<H: HermitianOp + ?Sized>(
    h: &H,
    psi: Array1<C64>,
    t: f64,
    opts: &KrylovOptions,
    depth: u32,
) -> Result<Array1<C64>> {
    if let Some(out) = single_step(h, &psi, t, opts)? {
        return Ok(out);
    }
    if depth >= opts.max_splits {
        return Err(Error::NonConvergence(format!(
            "Krylov propagation did not reach tol {} after {} step halvings",
            opts.tol, opts.max_splits
        )));
    }
    let half = evolve_split(h, psi, t / 2.0, opts, depth + 1)?;
    evolve_split(h, half, t / 2.0, opts, depth + 1)
}

/// One Lanczos step over the whole interval; `None` means the basis limit
/// was hit before the local error estimate dropped below tolerance.
fn single_step<H: HermitianOp + ?Sized>(
    h: &H,
    psi: &Array1<C64>,
    t: f64,
    opts: &KrylovOptions,
) -> Result<Option<Array1<C64>>> {
    let norm0 = norm(psi);
    if norm0 == 0.0 {
        return Err(Error::invalid("cannot propagate the zero vector"));
    }
    if t == 0.0 {
        return Ok(Some(psi.clone()));
    }
    let dim = psi.len();
    let max_dim = opts.max_dim.min(dim);
    let mut basis: Vec<Array1<C64>> = vec![psi / C64::new(norm0, 0.0)];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    for j in 0..max_dim {
        let mut w = apply_op(h, &basis[j]);
        let alpha = dot_conj(&basis[j], &w).re;
        alphas.push(alpha);
        // Two Gram-Schmidt passes keep the basis orthonormal to machine
        // precision even for long time steps.
        for _ in 0..2 {
            for v in &basis {
                let c = dot_conj(v, &w);
                w.zip_mut_with(v, |wi, vi| *wi -= c * vi);
            }
        }
        let beta = norm(&w);
        let (y, err) = propagate_tridiagonal(&alphas, &betas, t, beta)?;
        // beta near zero means an exactly invariant subspace.
        if err <= opts.tol || beta < 1e-14 {
            let mut out: Array1<C64> = Array1::zeros(dim);
            for (coeff, v) in y.iter().zip(basis.iter()) {
                let c = coeff * norm0;
                out.zip_mut_with(v, |oi, vi| *oi += c * vi);
            }
            return Ok(Some(out));
        }
        if j + 1 == max_dim {
            return Ok(None);
        }
        betas.push(beta);
        basis.push(w / C64::new(beta, 0.0));
    }
    Ok(None)
}

/// Computes y = exp(-i t T) e0 for the symmetric tridiagonal T defined by
/// `alphas`/`betas`, plus the standard residual estimate beta * |y_last|.
fn propagate_tridiagonal(
    alphas: &[f64],
    betas: &[f64],
    t: f64,
    next_beta: f64,
) -> Result<(Array1<C64>, f64)> {
    let m = alphas.len();
    let mut tri = Array2::<f64>::zeros((m, m));
    for (i, &a) in alphas.iter().enumerate() {
        tri[[i, i]] = a;
    }
    for (i, &b) in betas.iter().enumerate() {
        tri[[i, i + 1]] = b;
        tri[[i + 1, i]] = b;
    }
    let (evals, evecs) = tri.eigh(UPLO::Lower)?;
    let mut y: Array1<C64> = Array1::zeros(m);
    for col in 0..m {
        let phase = C64::new(0.0, -evals[col] * t).exp();
        let w0 = evecs[[0, col]];
        for row in 0..m {
            y[row] += C64::new(evecs[[row, col]] * w0, 0.0) * phase;
        }
    }
    let err = next_beta * y[m - 1].norm();
    Ok((y, err))
}

fn random_unit(dim: usize, seed: u64) -> Array1<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Array1<C64> = Array1::zeros(dim);
    for z in v.iter_mut() {
        *z = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let n = norm(&v);
    v / C64::new(n, 0.0)
}

fn mgs_sweep(w: &mut Array1<C64>, others: &[Array1<C64>]) {
    for v in others {
        let c = dot_conj(v, w);
        w.zip_mut_with(v, |wi, vi| *wi -= c * vi);
    }
}

fn orthogonalize_against(w: &mut Array1<C64>, others: &[Array1<C64>]) {
    for _ in 0..2 {
        mgs_sweep(w, others);
    }
}

/// Lowest eigenpairs of a Hermitian operator by restarted Lanczos with
/// deflation. Pairs are returned in ascending eigenvalue order; the search
/// stops once an eigenvalue exceeds the first by more than `spread_stop`
/// (the gap is then bracketed) or `max_pairs` pairs have converged.
pub(crate) fn lowest_eigenpairs<H: HermitianOp + ?Sized>(
    h: &H,
    max_pairs: usize,
    spread_stop: f64,
    res_tol: f64,
    seed: u64,
) -> Result<Vec<(f64, Array1<C64>)>> {
    let dim = h.dim();
    let max_pairs = max_pairs.min(dim);
    let mut found: Vec<(f64, Array1<C64>)> = Vec::new();

    while found.len() < max_pairs {
        let deflated: Vec<Array1<C64>> = found.iter().map(|(_, v)| v.clone()).collect();
        let mut v = random_unit(dim, seed.wrapping_add(found.len() as u64));
        orthogonalize_against(&mut v, &deflated);
        let vn = norm(&v);
        if vn < 1e-10 {
            break; // complement exhausted
        }
        v /= C64::new(vn, 0.0);

        let m_max = 120.min(dim - found.len());
        let mut converged = None;
        for _round in 0..80 {
            let (theta, x, residual) = lanczos_round(h, &v, &deflated, m_max)?;
            if residual <= res_tol {
                converged = Some((theta, x));
                break;
            }
            v = x;
        }
        let (theta, x) = converged.ok_or_else(|| {
            Error::NonConvergence(format!(
                "Lanczos eigenpair {} stalled above residual {res_tol}",
                found.len()
            ))
        })?;
        found.push((theta, x));
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
        if found.last().expect("nonempty").0 > found[0].0 + spread_stop {
            break;
        }
    }
    Ok(found)
}

/// One Lanczos pass in the orthogonal complement of `deflated`; returns the
/// lowest Ritz pair and its explicit residual norm.
fn lanczos_round<H: HermitianOp + ?Sized>(
    h: &H,
    start: &Array1<C64>,
    deflated: &[Array1<C64>],
    m_max: usize,
) -> Result<(f64, Array1<C64>, f64)> {
    let mut basis = vec![start.clone()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for j in 0..m_max {
        let mut w = apply_op(h, &basis[j]);
        let alpha = dot_conj(&basis[j], &w).re;
        alphas.push(alpha);
        let pre_norm = norm(&w);
        // The sweeps must alternate: the basis sweep's coefficients are
        // O(|H|) and carry each basis vector's residual deflated overlap
        // back into w, so cleaning deflated once up front lets that
        // reintroduction compound geometrically over steps until ghost
        // copies of deflated eigenvalues appear in the tridiagonal.
        for _ in 0..2 {
            mgs_sweep(&mut w, deflated);
            mgs_sweep(&mut w, &basis);
        }
        let beta = norm(&w);
        // Once the Krylov space exhausts an invariant subspace, w is pure
        // cancellation roundoff; normalizing it would seed junk basis
        // vectors. The drop relative to ||H b_j|| detects exhaustion at
        // any operator scale.
        if beta <= pre_norm * 1e-7 || beta < 1e-13 || j + 1 == m_max {
            break;
        }
        betas.push(beta);
        basis.push(w / C64::new(beta, 0.0));
    }
    let m = alphas.len();
    let mut tri = Array2::<f64>::zeros((m, m));
    for (i, &a) in alphas.iter().enumerate() {
        tri[[i, i]] = a;
    }
    for (i, &b) in betas.iter().enumerate() {
        tri[[i, i + 1]] = b;
        tri[[i + 1, i]] = b;
    }
    let (evals, evecs) = tri.eigh(UPLO::Lower)?;
    let mut x: Array1<C64> = Array1::zeros(h.dim());
    for (i, v) in basis.iter().enumerate() {
        let c = C64::new(evecs[[i, 0]], 0.0);
        x.zip_mut_with(v, |xi, vi| *xi += c * vi);
    }
    // Ritz vectors can lose a little orthogonality to the deflated set;
    // re-project so converged pairs are never rediscovered.
    orthogonalize_against(&mut x, deflated);
    let xn = norm(&x);
    x /= C64::new(xn, 0.0);
    let theta = evals[0];
    let mut hx = apply_op(h, &x);
    hx.zip_mut_with(&x, |hi, xi| *hi -= C64::new(theta, 0.0) * xi);
    orthogonalize_against(&mut hx, deflated);
    Ok((theta, x, norm(&hx)))
}
