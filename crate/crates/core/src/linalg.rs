//! Dense Hermitian eigendecomposition with a verified eigenvector layout.
//!
//! The eigenvector orientation returned by LAPACK-backed eigh depends on
//! the memory layout of the input (C-layout complex input comes back with
//! conjugated columns). `eigh_full` measures the residual of both
//! conventions and returns columns that satisfy A v = lambda v directly.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::Result;
use crate::C64;

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix, with
/// column i satisfying A v_i = lambda_i v_i.
pub(crate) fn eigh_full(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let (evals, evecs) = a.eigh(UPLO::Lower)?;
    let dim = a.nrows();
    let mut res_plain = 0.0f64;
    let mut res_conj = 0.0f64;
    for i in 0..dim {
        let lambda = C64::new(evals[i], 0.0);
        for r in 0..dim {
            let mut av_plain = C64::new(0.0, 0.0);
            let mut av_conj = C64::new(0.0, 0.0);
            for c in 0..dim {
                av_plain += a[[r, c]] * evecs[[c, i]];
                av_conj += a[[r, c]] * evecs[[c, i]].conj();
            }
            res_plain += (av_plain - lambda * evecs[[r, i]]).norm_sqr();
            res_conj += (av_conj - lambda * evecs[[r, i]].conj()).norm_sqr();
        }
    }
    if res_conj < res_plain {
        Ok((evals, evecs.mapv(|z| z.conj())))
    } else {
        Ok((evals, evecs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rebuild(evals: &Array1<f64>, evecs: &Array2<C64>) -> Array2<C64> {
        let dim = evecs.nrows();
        let mut out = Array2::<C64>::zeros((dim, dim));
        for i in 0..dim {
            for r in 0..dim {
                for c in 0..dim {
                    out[[r, c]] +=
                        C64::new(evals[i], 0.0) * evecs[[r, i]] * evecs[[c, i]].conj();
                }
            }
        }
        out
    }

    #[test]
    fn corrects_c_layout_conjugation() {
        // C-layout literal with complex off-diagonal, the case where raw
        // eigh returns conjugated columns.
        let a = array![
            [C64::new(1.0, 0.0), C64::new(0.3, 0.4)],
            [C64::new(0.3, -0.4), C64::new(-0.5, 0.0)]
        ];
        let (evals, evecs) = eigh_full(&a).unwrap();
        let diff = rebuild(&evals, &evecs) - &a;
        let err: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-12, "rebuild residual {err}");
    }

    #[test]
    fn handles_f_layout_and_random_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let dim = rng.gen_range(2..9);
            let mut m: Array2<C64> = Array2::zeros((dim, dim));
            for i in 0..dim {
                for j in 0..dim {
                    m[[i, j]] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            // This construction happens to yield an F-layout array, the
            // other memory-order branch of the backend.
            let a = (m.mapv(|z| z.conj()).t().to_owned() + &m).mapv(|z| z * 0.5);
            let (evals, evecs) = eigh_full(&a).unwrap();
            let diff = rebuild(&evals, &evecs) - &a;
            let err: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(err < 1e-10, "trial {trial}: rebuild residual {err}");
            for i in 1..dim {
                assert!(evals[i] >= evals[i - 1]);
            }
        }
    }
}
