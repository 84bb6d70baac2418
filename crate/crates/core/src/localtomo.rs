//! Reduced-density-matrix estimation for contiguous site windows.
//!
//! Every k-site window is estimated from the shot records by pooling all
//! settings compatible with each Pauli word, inverting the Pauli expansion,
//! and projecting the result back onto the physical set (unit trace,
//! positive semidefinite) in Frobenius norm.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactsim::DensityMatrix;
use crate::measure::ShotRecord;
use crate::pauli::{enumerate_words, word_operator, word_to_string, Pauli};
use crate::C64;

const FORMAT: &str = "winest-v1";

/// Everything the pipeline keeps about one estimated window.
#[derive(Debug, Clone)]
pub struct WindowEstimate {
    pub window_start: usize,
    pub window_len: usize,
    pub rho: DensityMatrix,
    pub pauli_means: BTreeMap<String, f64>,
    pub pauli_stderrs: BTreeMap<String, f64>,
    pub shots_used: BTreeMap<String, u64>,
}

/// Pooled mean, standard error, and pooled shot count of one Pauli word.
/// `ops` lists (site, letter) pairs; identity letters may be included and
/// are ignored. An empty (all-identity) word has mean 1 by normalization.
pub fn pauli_word_estimate(
    records: &[ShotRecord],
    ops: &[(usize, Pauli)],
) -> Result<(f64, f64, u64)> {
    if records.is_empty() {
        return Err(Error::invalid("no shot records supplied"));
    }
    let n = records[0].n_sites();
    let active: Vec<(usize, Pauli)> = ops
        .iter()
        .copied()
        .filter(|(_, p)| *p != Pauli::I)
        .collect();
    for &(site, _) in &active {
        if site >= n {
            return Err(Error::invalid(format!("site {site} outside a {n}-site chain")));
        }
    }
    if active.is_empty() {
        let total: u64 = records.iter().map(|r| r.shots).sum();
        return Ok((1.0, 0.0, total));
    }
    let mut n_total = 0u64;
    let mut sum = 0.0f64;
    for rec in records {
        if rec.n_sites() != n {
            return Err(Error::invalid("records mix chain lengths"));
        }
        let compatible = active
            .iter()
            .all(|&(site, p)| rec.setting.axis(site).to_pauli() == p);
        if !compatible {
            continue;
        }
        n_total += rec.shots;
        for (outcome, &count) in &rec.counts {
            let bytes = outcome.as_bytes();
            let mut value = 1.0f64;
            for &(site, _) in &active {
                value *= if bytes[site] == b'1' { 1.0 } else { -1.0 };
            }
            sum += value * count as f64;
        }
    }
    if n_total == 0 {
        let word: String = active
            .iter()
            .map(|&(s, p)| format!("{}@{s}", p.as_char()))
            .collect::<Vec<_>>()
            .join(",");
        return Err(Error::Coverage(format!("no compatible setting measures {word}")));
    }
    let mean = sum / n_total as f64;
    // Outcomes are +/-1, so the sample variance reduces to n(1-mean^2)/(n-1).
    let stderr = if n_total > 1 {
        let var = (n_total as f64) * (1.0 - mean * mean) / (n_total as f64 - 1.0);
        (var.max(0.0) / n_total as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr, n_total))
}

/// Per-word (mean, stderr, pooled shot count) maps keyed by Pauli string.
pub type WordEstimates = (BTreeMap<String, f64>, BTreeMap<String, f64>, BTreeMap<String, u64>);

/// Estimates all 4^k Pauli words of the window starting at `window_start`.
pub fn pauli_estimates(records: &[ShotRecord], window_start: usize, k: usize) -> Result<WordEstimates> {
    if records.is_empty() {
        return Err(Error::invalid("no shot records supplied"));
    }
    let n = records[0].n_sites();
    if k == 0 || k > 8 || window_start + k > n {
        return Err(Error::invalid(format!(
            "window [{window_start}, {window_start}+{k}) invalid for {n} sites"
        )));
    }
    let mut means = BTreeMap::new();
    let mut stderrs = BTreeMap::new();
    let mut shots = BTreeMap::new();
    for word in enumerate_words(k) {
        let ops: Vec<(usize, Pauli)> = word
            .iter()
            .enumerate()
            .map(|(pos, &p)| (window_start + pos, p))
            .collect();
        let (mean, stderr, n_used) = pauli_word_estimate(records, &ops)?;
        let key = word_to_string(&word);
        means.insert(key.clone(), mean);
        stderrs.insert(key.clone(), stderr);
        shots.insert(key, n_used);
    }
    Ok((means, stderrs, shots))
}

/// rho = 2^-k sum_w mean_w sigma_w over all 4^k words.
pub fn linear_inversion(means: &BTreeMap<String, f64>, k: usize) -> Result<Array2<C64>> {
    let dim = 1usize << k;
    let mut rho = Array2::<C64>::zeros((dim, dim));
    for word in enumerate_words(k) {
        let key = word_to_string(&word);
        let mean = *means
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("missing Pauli mean for {key}")))?;
        let op = word_operator(&word);
        rho.scaled_add(C64::new(mean / dim as f64, 0.0), &op);
    }
    Ok(rho)
}

/// Euclidean projection of a vector onto the probability simplex.
pub(crate) fn project_to_simplex(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let mut prefix = 0.0f64;
    let mut theta = 0.0f64;
    for (j, &v) in sorted.iter().enumerate() {
        prefix += v;
        let candidate = (prefix - 1.0) / (j + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    values.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Nearest density matrix in Frobenius norm: hermitize, then project the
/// eigenvalue vector onto the probability simplex.
pub fn project_to_physical(mat: &Array2<C64>) -> Result<DensityMatrix> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::invalid("matrix must be square"));
    }
    let herm = mat.mapv(|z| z * 0.5) + mat.t().mapv(|z| z.conj() * 0.5);
    let (evals, evecs) = crate::linalg::eigh_full(&herm)?;
    let projected = project_to_simplex(evals.as_slice().expect("contiguous"));
    let dim = mat.nrows();
    let mut rho = Array2::<C64>::zeros((dim, dim));
    for (idx, &p) in projected.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let v = evecs.column(idx);
        for r in 0..dim {
            for c in 0..dim {
                rho[[r, c]] += C64::new(p, 0.0) * v[r] * v[c].conj();
            }
        }
    }
    DensityMatrix::new(rho)
}

/// Estimates every k-site window of the chain from shot records.
pub fn estimate_all_reductions(records: &[ShotRecord], k: usize) -> Result<Vec<WindowEstimate>> {
    if records.is_empty() {
        return Err(Error::invalid("no shot records supplied"));
    }
    let n = records[0].n_sites();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("window width {k} invalid for {n} sites")));
    }
    (0..=n - k)
        .map(|start| {
            let (means, stderrs, shots) = pauli_estimates(records, start, k)?;
            let raw = linear_inversion(&means, k)?;
            let rho = project_to_physical(&raw)?;
            Ok(WindowEstimate {
                window_start: start,
                window_len: k,
                rho,
                pauli_means: means,
                pauli_stderrs: stderrs,
                shots_used: shots,
            })
        })
        .collect()
}

/// Wraps exact reductions as zero-error estimates, the noiseless-input path.
pub fn exact_window_estimates(reductions: &[DensityMatrix]) -> Result<Vec<WindowEstimate>> {
    if reductions.is_empty() {
        return Err(Error::invalid("no reductions supplied"));
    }
    let k = reductions[0].n_sites();
    reductions
        .iter()
        .enumerate()
        .map(|(start, rho)| {
            if rho.n_sites() != k {
                return Err(Error::invalid("reductions mix window widths"));
            }
            let mut means = BTreeMap::new();
            let mut stderrs = BTreeMap::new();
            let mut shots = BTreeMap::new();
            for word in enumerate_words(k) {
                let key = word_to_string(&word);
                let op = word_operator(&word);
                means.insert(key.clone(), rho.expectation(&op).re);
                stderrs.insert(key.clone(), 0.0);
                shots.insert(key, 0u64);
            }
            Ok(WindowEstimate {
                window_start: start,
                window_len: k,
                rho: rho.clone(),
                pauli_means: means,
                pauli_stderrs: stderrs,
                shots_used: shots,
            })
        })
        .collect()
}

/// Frobenius distance between the shared (k-1)-site marginals of adjacent
/// windows; a large value flags inconsistent estimates.
pub fn overlap_consistency(estimates: &[WindowEstimate]) -> Result<Vec<f64>> {
    if estimates.len() < 2 {
        return Ok(Vec::new());
    }
    let k = estimates[0].window_len;
    if k < 2 {
        return Ok(vec![0.0; estimates.len() - 1]);
    }
    estimates
        .windows(2)
        .map(|pair| {
            let left = crate::exactsim::partial_trace(pair[0].rho.matrix(), k, &(1..k).collect::<Vec<_>>())?;
            let right = crate::exactsim::partial_trace(pair[1].rho.matrix(), k, &(0..k - 1).collect::<Vec<_>>())?;
            let diff = &left - &right;
            Ok(diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct WindowSerde {
    start: usize,
    means: BTreeMap<String, f64>,
    stderrs: BTreeMap<String, f64>,
    shots: BTreeMap<String, u64>,
    rho_re: Vec<f64>,
    rho_im: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EstimatesSerde {
    format: String,
    n_sites: usize,
    window_len: usize,
    windows: Vec<WindowSerde>,
}

/// Writes window estimates as a single JSON document.
pub fn persist_estimates<W: Write>(out: W, estimates: &[WindowEstimate]) -> Result<()> {
    if estimates.is_empty() {
        return Err(Error::invalid("no estimates to persist"));
    }
    let k = estimates[0].window_len;
    let n_sites = estimates.len() + k - 1;
    let windows = estimates
        .iter()
        .map(|e| {
            let flat = e.rho.matrix().iter().copied().collect::<Vec<C64>>();
            WindowSerde {
                start: e.window_start,
                means: e.pauli_means.clone(),
                stderrs: e.pauli_stderrs.clone(),
                shots: e.shots_used.clone(),
                rho_re: flat.iter().map(|z| z.re).collect(),
                rho_im: flat.iter().map(|z| z.im).collect(),
            }
        })
        .collect();
    let doc = EstimatesSerde {
        format: FORMAT.to_string(),
        n_sites,
        window_len: k,
        windows,
    };
    serde_json::to_writer(out, &doc)?;
    Ok(())
}

pub fn persist_estimates_to_path(path: &Path, estimates: &[WindowEstimate]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    persist_estimates(std::io::BufWriter::new(file), estimates)
}

/// Reads window estimates back; rebuilds and re-validates each matrix.
pub fn load_estimates<R: BufRead>(input: R) -> Result<Vec<WindowEstimate>> {
    let doc: EstimatesSerde = serde_json::from_reader(input)?;
    if doc.format != FORMAT {
        return Err(Error::format(format!(
            "unsupported estimates format {:?}, expected {FORMAT:?}",
            doc.format
        )));
    }
    let k = doc.window_len;
    let dim = 1usize << k;
    if doc.windows.len() + k != doc.n_sites + 1 {
        return Err(Error::format("window count does not match chain length"));
    }
    doc.windows
        .into_iter()
        .enumerate()
        .map(|(idx, w)| {
            if w.start != idx {
                return Err(Error::format(format!("window {idx} starts at {}", w.start)));
            }
            if w.rho_re.len() != dim * dim || w.rho_im.len() != dim * dim {
                return Err(Error::format(format!("window {idx}: wrong matrix size")));
            }
            let data: Vec<C64> = w
                .rho_re
                .iter()
                .zip(w.rho_im.iter())
                .map(|(&re, &im)| C64::new(re, im))
                .collect();
            let mat = Array2::from_shape_vec((dim, dim), data)?;
            Ok(WindowEstimate {
                window_start: w.start,
                window_len: k,
                rho: DensityMatrix::new(mat)?,
                pauli_means: w.means,
                pauli_stderrs: w.stderrs,
                shots_used: w.shots,
            })
        })
        .collect()
}

pub fn load_estimates_from_path(path: &Path) -> Result<Vec<WindowEstimate>> {
    let file = std::fs::File::open(path)?;
    load_estimates(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exactsim::{evolve_exact, exact_local_reductions, StateVector};
    use crate::measure::{run_campaign, schedule_settings, NoiseModel};
    use crate::spinmodel::{neel_state, ChainSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn simplex_projection_matches_frozen_cases() {
        let a = project_to_simplex(&[1.2, -0.2]);
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.0, epsilon = 1e-12);

        let b = project_to_simplex(&[0.7, 0.5, -0.1, -0.1]);
        assert_abs_diff_eq!(b[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(b[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(b[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[3], 0.0, epsilon = 1e-12);

        // Already on the simplex: unchanged.
        let c = project_to_simplex(&[0.25, 0.25, 0.5]);
        assert_abs_diff_eq!(c[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(c[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn simplex_projection_is_sum_one_and_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let dim = rng.gen_range(1..9);
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = project_to_simplex(&v);
            assert!(p.iter().all(|&x| x >= 0.0));
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_is_closest_among_probes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let p = project_to_simplex(&v);
            let d_proj: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            for _ in 0..20 {
                let mut q: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = q.iter().sum();
                q.iter_mut().for_each(|x| *x /= s);
                let d_q: f64 = v.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d_proj <= d_q + 1e-12);
            }
        }
    }

    #[test]
    fn physical_projection_fixes_negative_eigenvalue() {
        let mat = array![
            [C64::new(1.2, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(-0.2, 0.0)]
        ];
        let rho = project_to_physical(&mat).unwrap();
        assert_abs_diff_eq!(rho.matrix()[[0, 0]].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.matrix()[[1, 1]].re, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn physical_projection_leaves_valid_states_alone() {
        let spec = ChainSpec::power_law(4, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(4).unwrap(), 0.7).unwrap();
        let rho = exact_local_reductions(&state, 2).unwrap().remove(1);
        let back = project_to_physical(rho.matrix()).unwrap();
        let diff = rho.matrix() - back.matrix();
        let dist: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(dist < 1e-10, "projection moved a valid state by {dist}");
    }

    #[test]
    fn exact_estimates_invert_to_the_same_matrix() {
        let spec = ChainSpec::power_law(5, 1.6, 1.0, 0.3).unwrap();
        let state = evolve_exact(&spec, &neel_state(5).unwrap(), 0.9).unwrap();
        let reductions = exact_local_reductions(&state, 2).unwrap();
        let estimates = exact_window_estimates(&reductions).unwrap();
        for (est, rho) in estimates.iter().zip(reductions.iter()) {
            let rebuilt = linear_inversion(&est.pauli_means, 2).unwrap();
            let diff = &rebuilt - rho.matrix();
            let dist: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(dist < 1e-10, "window {} off by {dist}", est.window_start);
            assert!(est.pauli_stderrs.values().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn pooling_combines_every_compatible_setting() {
        // For a 2-site chain scheduled at k = 2, the word Z at site 1 pools
        // settings XZ, YZ, ZZ: three of the nine.
        let state = StateVector::from_product(&neel_state(2).unwrap(), false).unwrap();
        let settings = schedule_settings(2, 2).unwrap();
        let per = 40u64;
        let records = run_campaign(&state, &settings, per, 3, &NoiseModel::none()).unwrap();
        let (mean, stderr, used) =
            pauli_word_estimate(&records, &[(1, Pauli::Z)]).unwrap();
        assert_eq!(used, 3 * per);
        // Site 1 of the 2-site alternating state is down: mean exactly -1.
        assert_abs_diff_eq!(mean, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stderr, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_word_is_normalized() {
        let state = StateVector::from_product(&neel_state(2).unwrap(), false).unwrap();
        let settings = schedule_settings(2, 1).unwrap();
        let records = run_campaign(&state, &settings, 10, 3, &NoiseModel::none()).unwrap();
        let (mean, stderr, used) = pauli_word_estimate(&records, &[]).unwrap();
        assert_eq!((mean, stderr), (1.0, 0.0));
        assert_eq!(used, 30);
    }

    #[test]
    fn missing_axis_is_a_coverage_error() {
        let state = StateVector::from_product(&neel_state(2).unwrap(), false).unwrap();
        let settings: Vec<_> = schedule_settings(2, 2)
            .unwrap()
            .into_iter()
            .filter(|s| s.word() != "XX")
            .collect();
        let records = run_campaign(&state, &settings, 10, 3, &NoiseModel::none()).unwrap();
        let err = pauli_word_estimate(&records, &[(0, Pauli::X), (1, Pauli::X)]).unwrap_err();
        assert!(matches!(err, Error::Coverage(_)));
    }

    #[test]
    fn singlet_statistics_recover_the_projector() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let singlet = StateVector::from_full(
            2,
            ndarray::Array1::from(vec![
                C64::new(0.0, 0.0),
                C64::new(h, 0.0),
                C64::new(-h, 0.0),
                C64::new(0.0, 0.0),
            ]),
        )
        .unwrap();
        let settings = schedule_settings(2, 2).unwrap();
        let records = run_campaign(&singlet, &settings, 4000, 17, &NoiseModel::none()).unwrap();
        let estimates = estimate_all_reductions(&records, 2).unwrap();
        assert_eq!(estimates.len(), 1);
        let est = &estimates[0];
        // Perfect anticorrelation along every axis is exact, not statistical.
        for w in ["XX", "YY", "ZZ"] {
            assert_abs_diff_eq!(est.pauli_means[w], -1.0, epsilon = 1e-12);
        }
        let rho = est.rho.matrix();
        let dist: f64 = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| {
                let want = match (r, c) {
                    (1, 1) | (2, 2) => C64::new(0.5, 0.0),
                    (1, 2) | (2, 1) => C64::new(-0.5, 0.0),
                    _ => C64::new(0.0, 0.0),
                };
                (rho[[r, c]] - want).norm_sqr()
            })
            .sum::<f64>()
            .sqrt();
        assert!(dist < 0.05, "estimated singlet off by {dist}");
    }

    #[test]
    fn sampled_estimates_converge_to_exact_reductions() {
        let spec = ChainSpec::power_law(4, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(4).unwrap(), 0.6).unwrap();
        let settings = schedule_settings(4, 2).unwrap();
        let records = run_campaign(&state, &settings, 8000, 23, &NoiseModel::none()).unwrap();
        let estimates = estimate_all_reductions(&records, 2).unwrap();
        let exact = exact_local_reductions(&state, 2).unwrap();
        for (est, truth) in estimates.iter().zip(exact.iter()) {
            let diff = est.rho.matrix() - truth.matrix();
            let dist: f64 = diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(dist < 0.08, "window {} off by {dist}", est.window_start);
        }
        let gaps = overlap_consistency(&estimates).unwrap();
        assert!(gaps.iter().all(|&g| g < 0.1), "marginal gaps {gaps:?}");
    }

    #[test]
    fn estimates_round_trip_through_json() {
        let spec = ChainSpec::power_law(4, 1.6, 1.0, 0.2).unwrap();
        let state = evolve_exact(&spec, &neel_state(4).unwrap(), 0.4).unwrap();
        let reductions = exact_local_reductions(&state, 2).unwrap();
        let estimates = exact_window_estimates(&reductions).unwrap();
        let mut buf = Vec::new();
        persist_estimates(&mut buf, &estimates).unwrap();
        let back = load_estimates(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.len(), estimates.len());
        for (a, b) in estimates.iter().zip(back.iter()) {
            assert_eq!(a.pauli_means, b.pauli_means);
            let diff = a.rho.matrix() - b.rho.matrix();
            assert!(diff.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt() < 1e-12);
        }
    }

    #[test]
    fn load_rejects_foreign_formats() {
        let doc = r#"{"format":"winest-v0","n_sites":2,"window_len":2,"windows":[]}"#;
        let err = load_estimates(std::io::BufReader::new(doc.as_bytes())).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
