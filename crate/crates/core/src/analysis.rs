//! Derived observables: magnetization profiles, entanglement negativity,
//! connected correlation matrices, a correlation-spread rate bound, and
//! direct fidelity estimation (DFE) by importance-sampled Pauli strings.

use ndarray::{Array1, Array2, Array3, Axis};
use ndarray_linalg::{EigValsh, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactsim::{pauli_expectation_exact, DensityMatrix, StateVector};
use crate::localtomo::pauli_word_estimate;
use crate::measure::ShotRecord;
use crate::mps::Mps;
use crate::pauli::{kron, parse_word, word_to_string, Pauli};
use crate::seed::derive_seed;
use crate::spinmodel::mean_nn_coupling;
use crate::{flip_site, site_bit, C64};

const FORMAT: &str = "dfe-v1";
/// Partial-transpose eigenvalues below this magnitude count as zero.
const NEGATIVITY_EIGVAL_TOL: f64 = 1e-12;
/// Dense partial transposes stop at 6 sites.
const NEGATIVITY_DIM_LIMIT: usize = 64;

/// Where observable values come from: an exact state, a tensor-network
/// state, or pooled shot records. State sources are assumed normalized;
/// record sources yield estimates and may lack coverage for some
/// observables.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    State(&'a StateVector),
    Mps(&'a Mps),
    Records(&'a [ShotRecord]),
}

impl Source<'_> {
    pub fn n_sites(&self) -> Result<usize> {
        match self {
            Source::State(s) => Ok(s.n_sites()),
            Source::Mps(m) => Ok(m.n_sites()),
            Source::Records(r) => {
                if r.is_empty() {
                    Err(Error::invalid("no shot records supplied"))
                } else {
                    Ok(r[0].n_sites())
                }
            }
        }
    }

    /// Expectation of a product of letters at distinct sites (ascending).
    fn expect(&self, ops: &[(usize, Pauli)]) -> Result<f64> {
        match self {
            Source::State(s) => {
                let mut word = vec![Pauli::I; s.n_sites()];
                for &(site, p) in ops {
                    word[site] = p;
                }
                pauli_expectation_exact(s, &word)
            }
            Source::Mps(m) => m.expectation_pauli_sites(ops),
            Source::Records(r) => pauli_word_estimate(r, ops).map(|(mean, _, _)| mean),
        }
    }

    /// Like `expect`, with missing record coverage reported as None.
    fn try_expect(&self, ops: &[(usize, Pauli)]) -> Result<Option<f64>> {
        match self.expect(ops) {
            Ok(v) => Ok(Some(v)),
            Err(Error::Coverage(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Per-site probability of finding the spin up, (1 + <Z_i>)/2.
pub fn magnetization_profile(source: &Source) -> Result<Vec<f64>> {
    let n = source.n_sites()?;
    (0..n)
        .map(|i| {
            let z = source.expect(&[(i, Pauli::Z)])?;
            Ok(((1.0 + z) / 2.0).clamp(0.0, 1.0))
        })
        .collect()
}

fn partial_transpose(mat: &Array2<C64>, n: usize, part: &[usize]) -> Array2<C64> {
    let mask: usize = part.iter().fold(0, |m, &s| m | (1usize << (n - 1 - s)));
    let dim = mat.nrows();
    let mut out = Array2::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            let ip = (i & !mask) | (j & mask);
            let jp = (j & !mask) | (i & mask);
            out[[i, j]] = mat[[ip, jp]];
        }
    }
    out
}

/// Entanglement negativity (trace norm of the partial transpose minus one,
/// halved) across the bipartition `part` versus the remaining sites.
pub fn negativity(rho: &DensityMatrix, part: &[usize]) -> Result<f64> {
    let n = rho.n_sites();
    if rho.dim() > NEGATIVITY_DIM_LIMIT {
        return Err(Error::SizeLimit("negativity limited to 6 sites (dimension 64)".into()));
    }
    if part.is_empty() || part.len() >= n {
        return Err(Error::invalid("bipartition needs sites on both sides"));
    }
    if part.windows(2).any(|w| w[0] >= w[1]) || *part.last().expect("nonempty") >= n {
        return Err(Error::invalid("partition sites must be strictly increasing and in range"));
    }
    let pt = partial_transpose(rho.matrix(), n, part);
    let evals = pt.eigvalsh(UPLO::Lower)?;
    let trace_norm: f64 = evals
        .iter()
        .map(|&l| if l.abs() < NEGATIVITY_EIGVAL_TOL { 0.0 } else { l.abs() })
        .sum();
    Ok((trace_norm - 1.0) / 2.0)
}

/// Geometric mean of the three one-versus-two negativity splittings of a
/// three-site state.
pub fn tripartite_negativity(rho: &DensityMatrix) -> Result<f64> {
    if rho.n_sites() != 3 {
        return Err(Error::invalid("tripartite negativity needs a 3-site state"));
    }
    let mut product = 1.0f64;
    for site in 0..3 {
        // The cube root amplifies rounding dust, so splittings at the
        // eigenvalue noise floor count as exactly zero.
        let n = negativity(rho, &[site])?;
        product *= if n < NEGATIVITY_EIGVAL_TOL { 0.0 } else { n };
    }
    Ok(product.cbrt())
}

/// Connected correlations C_ij = <A_i B_j> - <A_i><B_j> with a mask for
/// entries the source cannot supply. The diagonal holds 1 - <A_i>^2 when
/// the observables match and is masked otherwise (a same-site product of
/// two different letters is not an (A, B) correlation).
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub observable_pair: (Pauli, Pauli),
    pub values: Array2<f64>,
    /// true marks an entry with no measurement backing it.
    pub mask: Array2<bool>,
}

pub fn correlation_matrix(source: &Source, a: Pauli, b: Pauli) -> Result<CorrelationMatrix> {
    if a == Pauli::I || b == Pauli::I {
        return Err(Error::invalid("correlation observables must be X, Y, or Z"));
    }
    let n = source.n_sites()?;
    let mean_a: Vec<Option<f64>> =
        (0..n).map(|i| source.try_expect(&[(i, a)])).collect::<Result<_>>()?;
    let mean_b: Vec<Option<f64>> = if a == b {
        mean_a.clone()
    } else {
        (0..n).map(|j| source.try_expect(&[(j, b)])).collect::<Result<_>>()?
    };
    let mut values = Array2::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                match (a == b, mean_a[i]) {
                    (true, Some(m)) => values[[i, i]] = 1.0 - m * m,
                    _ => mask[[i, i]] = true,
                }
                continue;
            }
            let ops = if i < j { [(i, a), (j, b)] } else { [(j, b), (i, a)] };
            match (source.try_expect(&ops)?, mean_a[i], mean_b[j]) {
                (Some(pair), Some(ma), Some(mb)) => values[[i, j]] = pair - ma * mb,
                _ => mask[[i, j]] = true,
            }
        }
    }
    Ok(CorrelationMatrix { observable_pair: (a, b), values, mask })
}

/// Upper bound on the correlation spread rate, 2e max_j sum_{i != j}
/// |J_ij|, in sites per unit time.
pub fn light_cone_velocity(couplings: &Array2<f64>) -> Result<f64> {
    let n = couplings.nrows();
    if n == 0 || couplings.ncols() != n {
        return Err(Error::invalid("couplings must form a nonempty square matrix"));
    }
    let max_row = (0..n)
        .map(|j| (0..n).filter(|&i| i != j).map(|i| couplings[[i, j]].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    Ok(2.0 * std::f64::consts::E * max_row)
}

/// Overlay rows (t, t * Jbar, v * t) pairing each time with the bound on
/// how many sites correlations may have spread.
pub fn light_cone_overlay(
    couplings: &Array2<f64>,
    times: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    let v = light_cone_velocity(couplings)?;
    let jbar = mean_nn_coupling(couplings);
    Ok(times.iter().map(|&t| (t, t * jbar, v * t)).collect())
}

/// Importance-sampling plan over Pauli strings: string s is drawn with
/// probability chi(s)^2 where chi(s) = <Psi|s|Psi> / sqrt(2^N), so the
/// fidelity estimator over the plan is unbiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfePlan {
    pub pauli_strings: Vec<String>,
    /// chi^2 of each drawn string (its sampling probability).
    pub weights: Vec<f64>,
    pub chi_psi: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Single-layer transfer matrices of one site tensor, one per letter.
/// Row index is (ket_left * dl + bra_left), column (ket_right * dr +
/// bra_right); chaining them left to right contracts <Psi|P|Psi>.
fn site_transfers(t: &Array3<C64>) -> [Array2<C64>; 4] {
    let (dl, _, dr) = t.dim();
    Pauli::ALL.map(|p| {
        let m = p.matrix();
        let mut out: Array2<C64> = Array2::zeros((dl * dl, dr * dr));
        for sp in 0..2 {
            for s in 0..2 {
                let coeff = m[[sp, s]];
                if coeff == C64::new(0.0, 0.0) {
                    continue;
                }
                let ket = t.index_axis(Axis(1), s).to_owned();
                let bra = t.index_axis(Axis(1), sp).mapv(|z| z.conj());
                out = out + kron(&ket, &bra).mapv(|z| z * coeff);
            }
        }
        out
    })
}

/// Draws `n_samples` Pauli strings from the chi^2 distribution of `mps` by
/// site-by-site conditional sampling. The suffix marginals come from
/// doubled transfer environments (two independent copies of the chain
/// contract the square of the amplitude); the per-site conditional of a
/// letter is then an explicit bilinear form. Deterministic per seed.
pub fn dfe_plan(mps: &Mps, n_samples: usize, seed: u64) -> Result<DfePlan> {
    if n_samples == 0 {
        return Err(Error::invalid("a sampling plan needs at least one sample"));
    }
    let mps = mps.normalized()?;
    let n = mps.n_sites();
    let transfers: Vec<[Array2<C64>; 4]> = mps.tensors().iter().map(site_transfers).collect();

    // renv[i] covers sites i+1.. as a bilinear form on the doubled right
    // bond of site i; each suffix site carries the 1/2 of its chi^2 weight.
    let mut renv: Vec<Array2<C64>> = vec![Array2::ones((1, 1)); n];
    for i in (0..n - 1).rev() {
        let mut acc: Option<Array2<C64>> = None;
        for t in &transfers[i + 1] {
            let term = t.dot(&renv[i + 1]).dot(&t.t()).mapv(|z| z * 0.5);
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        renv[i] = acc.expect("four letters");
    }

    let scale = ((1u128 << n) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dfe-plan", &[]));
    let mut strings = Vec::with_capacity(n_samples);
    let mut weights = Vec::with_capacity(n_samples);
    let mut chis = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut left: Array1<C64> = Array1::ones(1);
        let mut word = Vec::with_capacity(n);
        for i in 0..n {
            let candidates: [Array1<C64>; 4] =
                [0, 1, 2, 3].map(|p| transfers[i][p].t().dot(&left));
            let w: [f64; 4] = [0, 1, 2, 3].map(|p| {
                let lp = &candidates[p];
                lp.dot(&renv[i].dot(lp)).re.max(0.0)
            });
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::invalid("state leaves no sampling weight at a site"));
            }
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = w.iter().rposition(|&x| x > 0.0).expect("positive total");
            for (p, &wp) in w.iter().enumerate() {
                acc += wp;
                if wp > 0.0 && r < acc {
                    pick = p;
                    break;
                }
            }
            word.push(Pauli::ALL[pick]);
            left = candidates[pick].clone();
        }
        let amp = left[0].re;
        if amp == 0.0 {
            return Err(Error::invalid("sampled a string with vanishing amplitude"));
        }
        let chi = amp / scale;
        strings.push(word_to_string(&word));
        weights.push(chi * chi);
        chis.push(chi);
    }
    Ok(DfePlan { pauli_strings: strings, weights, chi_psi: chis, n_samples, seed })
}

/// Laboratory side of a fidelity estimate: exact pure state, exact mixed
/// state, or dedicated per-string shot records.
#[derive(Clone, Copy)]
pub enum DfeSource<'a> {
    State(&'a StateVector),
    Density(&'a DensityMatrix),
    Records(&'a [ShotRecord]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfeResult {
    pub fidelity: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// tr(rho P) by walking the single nonzero entry of each P row.
fn pauli_expectation_density(rho: &DensityMatrix, word: &[Pauli]) -> f64 {
    let n = word.len();
    let mat = rho.matrix();
    let mut acc = C64::new(0.0, 0.0);
    for x in 0..mat.nrows() {
        let mut target = x;
        let mut phase = C64::new(1.0, 0.0);
        for (site, &p) in word.iter().enumerate() {
            let bit = site_bit(x, site, n);
            let (new_bit, ph) = p.apply_to_bit(bit);
            if new_bit != bit {
                target = flip_site(target, site, n);
            }
            phase *= ph;
        }
        acc += phase * mat[[x, target]];
    }
    acc.re
}

fn validate_plan(plan: &DfePlan) -> Result<usize> {
    if plan.pauli_strings.is_empty() {
        return Err(Error::invalid("plan holds no strings"));
    }
    if plan.pauli_strings.len() != plan.chi_psi.len()
        || plan.pauli_strings.len() != plan.weights.len()
        || plan.pauli_strings.len() != plan.n_samples
    {
        return Err(Error::invalid("plan fields disagree on the sample count"));
    }
    let n = plan.pauli_strings[0].len();
    if plan.pauli_strings.iter().any(|s| s.len() != n) {
        return Err(Error::invalid("plan strings mix chain lengths"));
    }
    if plan.chi_psi.iter().any(|&c| c == 0.0 || !c.is_finite()) {
        return Err(Error::invalid("plan chi values must be finite and nonzero"));
    }
    Ok(n)
}

/// Fidelity estimate F = mean of chi_lab(P)/chi_psi(P) over the plan, with
/// the sample standard error. Record sources must supply a compatible
/// setting for every planned string.
pub fn dfe_estimate(plan: &DfePlan, lab: &DfeSource) -> Result<DfeResult> {
    let n = validate_plan(plan)?;
    let source_sites = match lab {
        DfeSource::State(s) => s.n_sites(),
        DfeSource::Density(d) => d.n_sites(),
        DfeSource::Records(r) => {
            if r.is_empty() {
                return Err(Error::invalid("no shot records supplied"));
            }
            r[0].n_sites()
        }
    };
    if source_sites != n {
        return Err(Error::invalid("laboratory source lives on a different chain"));
    }
    let words: Vec<Vec<Pauli>> =
        plan.pauli_strings.iter().map(|s| parse_word(s)).collect::<Result<_>>()?;
    let traces: Vec<Result<f64>> = words
        .par_iter()
        .map(|word| match lab {
            DfeSource::State(s) => pauli_expectation_exact(s, word),
            DfeSource::Density(d) => Ok(pauli_expectation_density(d, word)),
            DfeSource::Records(r) => {
                let ops: Vec<(usize, Pauli)> = word
                    .iter()
                    .enumerate()
                    .filter(|&(_, &p)| p != Pauli::I)
                    .map(|(site, &p)| (site, p))
                    .collect();
                pauli_word_estimate(r, &ops).map(|(mean, _, _)| mean)
            }
        })
        .collect();

    let mut uncovered = Vec::new();
    let mut ratios = Vec::with_capacity(traces.len());
    let scale = ((1u128 << n) as f64).sqrt();
    for (i, trace) in traces.into_iter().enumerate() {
        match trace {
            Ok(t) => ratios.push(t / (plan.chi_psi[i] * scale)),
            Err(Error::Coverage(_)) => uncovered.push(plan.pauli_strings[i].clone()),
            Err(e) => return Err(e),
        }
    }
    if !uncovered.is_empty() {
        uncovered.dedup();
        return Err(Error::Coverage(format!(
            "no dedicated measurements for planned strings: {}",
            uncovered.join(", ")
        )));
    }
    let count = ratios.len();
    let fidelity = ratios.iter().sum::<f64>() / count as f64;
    let stderr = if count > 1 {
        let var =
            ratios.iter().map(|r| (r - fidelity).powi(2)).sum::<f64>() / (count - 1) as f64;
        (var / count as f64).sqrt()
    } else {
        0.0
    };
    Ok(DfeResult { fidelity, stderr, n_samples: count })
}

#[derive(Serialize, Deserialize)]
struct PlanSerde {
    format: String,
    #[serde(flatten)]
    plan: DfePlan,
}

#[derive(Serialize, Deserialize)]
struct ResultSerde {
    format: String,
    #[serde(flatten)]
    result: DfeResult,
}

impl DfePlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PlanSerde {
            format: FORMAT.to_string(),
            plan: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<DfePlan> {
        let parsed: PlanSerde = serde_json::from_str(text)?;
        if parsed.format != FORMAT {
            return Err(Error::format(format!(
                "expected {FORMAT}, found {}",
                parsed.format
            )));
        }
        Ok(parsed.plan)
    }
}

impl DfeResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ResultSerde {
            format: FORMAT.to_string(),
            result: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<DfeResult> {
        let parsed: ResultSerde = serde_json::from_str(text)?;
        if parsed.format != FORMAT {
            return Err(Error::format(format!(
                "expected {FORMAT}, found {}",
                parsed.format
            )));
        }
        Ok(parsed.result)
    }
}

/// CSV with header site,time,p_up.
pub fn magnetization_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("site,time,p_up\n");
    for &(site, time, p_up) in rows {
        out.push_str(&format!("{site},{time},{p_up}\n"));
    }
    out
}

/// CSV with header i,j,value,masked; masked entries carry value 0.
pub fn correlation_csv(m: &CorrelationMatrix) -> String {
    let mut out = String::from("i,j,value,masked\n");
    for ((i, j), &v) in m.values.indexed_iter() {
        out.push_str(&format!("{i},{j},{v},{}\n", m.mask[[i, j]]));
    }
    out
}

/// CSV with header window,value,stderr.
pub fn negativity_csv(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("window,value,stderr\n");
    for (window, value, stderr) in rows {
        out.push_str(&format!("{window},{value},{stderr}\n"));
    }
    out
}
