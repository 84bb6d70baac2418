//! Simulated single-site measurement campaigns.
//!
//! A campaign measures every spin along one axis per setting. The schedule
//! repeats a base-3 word of length k along the chain, which makes every
//! contiguous k-site window see all 3^k axis combinations exactly once
//! across the 3^k settings. Outcomes are Born-sampled; local depolarizing
//! noise enters as an independent outcome flip with probability p/2 per
//! site, which is exactly the depolarizing channel as seen by product-basis
//! measurements.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactsim::StateVector;
use crate::pauli::Pauli;
use crate::seed::derive_seed;
use crate::{site_bit, C64};

const FORMAT: &str = "shots-v1";

/// Measurement axis for one site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn as_char(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }

    pub fn from_char(c: char) -> Result<Axis> {
        match c {
            'X' => Ok(Axis::X),
            'Y' => Ok(Axis::Y),
            'Z' => Ok(Axis::Z),
            other => Err(Error::invalid(format!("unknown axis {other:?}"))),
        }
    }

    pub fn to_pauli(self) -> Pauli {
        match self {
            Axis::X => Pauli::X,
            Axis::Y => Pauli::Y,
            Axis::Z => Pauli::Z,
        }
    }

    /// One row of the rotation: the outcome bra, row 0 for the +1 outcome.
    pub(crate) fn rotation_row(self, row: usize) -> [C64; 2] {
        self.rotation()[row]
    }

    /// Rows are the outcome bras: row 0 is the +1 outcome.
    fn rotation(self) -> [[C64; 2]; 2] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Axis::X => [
                [C64::new(h, 0.0), C64::new(h, 0.0)],
                [C64::new(h, 0.0), C64::new(-h, 0.0)],
            ],
            Axis::Y => [
                [C64::new(h, 0.0), C64::new(0.0, -h)],
                [C64::new(h, 0.0), C64::new(0.0, h)],
            ],
            Axis::Z => [
                [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            ],
        }
    }
}

/// One axis per site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSetting {
    axes: Vec<Axis>,
}

impl BasisSetting {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("setting needs at least one site"));
        }
        Ok(BasisSetting { axes })
    }

    pub fn from_word(s: &str) -> Result<Self> {
        BasisSetting::new(s.chars().map(Axis::from_char).collect::<Result<Vec<_>>>()?)
    }

    pub fn n_sites(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, site: usize) -> Axis {
        self.axes[site]
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn word(&self) -> String {
        self.axes.iter().map(|a| a.as_char()).collect()
    }
}

/// Local depolarizing strength applied identically to every site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p_local: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel { p_local: 0.0 }
    }

    pub fn new(p_local: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_local) {
            return Err(Error::invalid("depolarizing probability must lie in [0, 1]"));
        }
        Ok(NoiseModel { p_local })
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::none()
    }
}

/// Outcome histogram of one measurement setting. Outcome strings list site
/// 0 first; character '1' is the +1 outcome along the site's axis.
#[derive(Debug, Clone)]
pub struct ShotRecord {
    pub setting: BasisSetting,
    pub shots: u64,
    pub seed: u64,
    pub noise_p: f64,
    pub counts: BTreeMap<String, u64>,
}

impl ShotRecord {
    pub fn n_sites(&self) -> usize {
        self.setting.n_sites()
    }
}

/// The periodic-word schedule: 3^k settings, setting w assigns site j the
/// axis with base-3 digit (j mod k) of w, digits ordered X < Y < Z.
pub fn schedule_settings(n_sites: usize, k: usize) -> Result<Vec<BasisSetting>> {
    if k == 0 || k > n_sites {
        return Err(Error::invalid(format!("window width {k} invalid for {n_sites} sites")));
    }
    if k > 8 {
        return Err(Error::SizeLimit("schedules limited to width 8 (6561 settings)".into()));
    }
    let count = 3usize.pow(k as u32);
    let axes_of = |digit: usize| match digit {
        0 => Axis::X,
        1 => Axis::Y,
        _ => Axis::Z,
    };
    Ok((0..count)
        .map(|w| {
            let mut digits = vec![0usize; k];
            let mut rem = w;
            for pos in (0..k).rev() {
                digits[pos] = rem % 3;
                rem /= 3;
            }
            let axes = (0..n_sites).map(|j| axes_of(digits[j % k])).collect();
            BasisSetting { axes }
        })
        .collect())
}

/// Born-samples `shots` outcomes of `setting` on `state`.
pub fn sample_shots(
    state: &StateVector,
    setting: &BasisSetting,
    shots: u64,
    seed: u64,
    noise: &NoiseModel,
) -> Result<ShotRecord> {
    let n = state.n_sites();
    if setting.n_sites() != n {
        return Err(Error::invalid("setting length does not match chain"));
    }
    if shots == 0 {
        return Err(Error::invalid("need at least one shot"));
    }
    let mut psi = state.to_full();
    for (site, axis) in setting.axes.iter().enumerate() {
        let v = axis.rotation();
        if matches!(axis, Axis::Z) {
            continue;
        }
        let mask = 1usize << (n - 1 - site);
        for idx in 0..psi.len() {
            if idx & mask == 0 {
                let a0 = psi[idx];
                let a1 = psi[idx | mask];
                psi[idx] = v[0][0] * a0 + v[0][1] * a1;
                psi[idx | mask] = v[1][0] * a0 + v[1][1] * a1;
            }
        }
    }
    let mut cdf: Vec<f64> = Vec::with_capacity(psi.len());
    let mut acc = 0.0f64;
    for z in psi.iter() {
        acc += z.norm_sqr();
        cdf.push(acc);
    }
    let total = acc;
    if total <= 0.0 {
        return Err(Error::invalid("state has no probability mass"));
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }
    let flip_prob = noise.p_local / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut outcome = vec![b'0'; n];
    for _ in 0..shots {
        let r: f64 = rng.gen();
        let idx = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        for (site, ch) in outcome.iter_mut().enumerate() {
            // Bit 0 is the +1 outcome, written as '1'.
            *ch = if site_bit(idx, site, n) == 0 { b'1' } else { b'0' };
        }
        if flip_prob > 0.0 {
            for ch in outcome.iter_mut() {
                if rng.gen::<f64>() < flip_prob {
                    *ch = if *ch == b'1' { b'0' } else { b'1' };
                }
            }
        }
        let key = String::from_utf8(outcome.clone()).expect("ascii outcome");
        *counts.entry(key).or_insert(0) += 1;
    }
    Ok(ShotRecord {
        setting: setting.clone(),
        shots,
        seed,
        noise_p: noise.p_local,
        counts,
    })
}

/// Runs every setting of a campaign; setting i draws its own seed from the
/// master seed, so results do not depend on scheduling order.
pub fn run_campaign(
    state: &StateVector,
    settings: &[BasisSetting],
    shots: u64,
    master_seed: u64,
    noise: &NoiseModel,
) -> Result<Vec<ShotRecord>> {
    settings
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(master_seed, "setting", &[i as u64]);
            sample_shots(state, s, shots, seed, noise)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct RecordSerde {
    format: String,
    setting: String,
    shots: u64,
    seed: u64,
    noise_p: f64,
    counts: BTreeMap<String, u64>,
}

/// Writes records as one JSON object per line.
pub fn persist_records<W: Write>(mut out: W, records: &[ShotRecord]) -> Result<()> {
    for r in records {
        let line = RecordSerde {
            format: FORMAT.to_string(),
            setting: r.setting.word(),
            shots: r.shots,
            seed: r.seed,
            noise_p: r.noise_p,
            counts: r.counts.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn persist_records_to_path(path: &Path, records: &[ShotRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    persist_records(std::io::BufWriter::new(file), records)
}

/// Reads and validates a record stream; errors carry 1-based line numbers.
pub fn ingest_records<R: BufRead>(input: R) -> Result<Vec<ShotRecord>> {
    let mut records = Vec::new();
    let mut n_sites: Option<usize> = None;
    for (lineno, line) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordSerde = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        if raw.format != FORMAT {
            return Err(Error::format(format!(
                "line {lineno}: unsupported record format {:?}, expected {FORMAT:?}",
                raw.format
            )));
        }
        let setting = BasisSetting::from_word(&raw.setting)
            .map_err(|e| Error::format(format!("line {lineno}: {e}")))?;
        let n = setting.n_sites();
        if *n_sites.get_or_insert(n) != n {
            return Err(Error::format(format!("line {lineno}: inconsistent chain length")));
        }
        if !(0.0..=1.0).contains(&raw.noise_p) {
            return Err(Error::format(format!("line {lineno}: noise_p out of range")));
        }
        let mut total = 0u64;
        for (outcome, &count) in &raw.counts {
            if outcome.len() != n || outcome.bytes().any(|b| b != b'0' && b != b'1') {
                return Err(Error::format(format!(
                    "line {lineno}: malformed outcome {outcome:?}"
                )));
            }
            total += count;
        }
        if total != raw.shots {
            return Err(Error::format(format!(
                "line {lineno}: counts sum to {total} but shots = {}",
                raw.shots
            )));
        }
        records.push(ShotRecord {
            setting,
            shots: raw.shots,
            seed: raw.seed,
            noise_p: raw.noise_p,
            counts: raw.counts,
        });
    }
    if records.is_empty() {
        return Err(Error::format("record stream holds no records"));
    }
    Ok(records)
}

pub fn ingest_records_from_path(path: &Path) -> Result<Vec<ShotRecord>> {
    let file = std::fs::File::open(path)?;
    ingest_records(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exactsim::evolve_exact;
    use crate::spinmodel::{neel_state, ChainSpec, ProductState};
    use ndarray::Array1;

    fn neel_sv(n: usize) -> StateVector {
        StateVector::from_product(&neel_state(n).unwrap(), false).unwrap()
    }

    #[test]
    fn schedule_covers_every_window_exactly_once() {
        let k = 3;
        let settings = schedule_settings(7, k).unwrap();
        assert_eq!(settings.len(), 27);
        for start in 0..=7 - k {
            let mut seen = std::collections::HashSet::new();
            for s in &settings {
                let combo: String =
                    (start..start + k).map(|j| s.axis(j).as_char()).collect();
                assert!(seen.insert(combo), "window {start} repeats a combination");
            }
            assert_eq!(seen.len(), 27);
        }
    }

    #[test]
    fn schedule_repeats_with_period_k() {
        let settings = schedule_settings(8, 3).unwrap();
        for s in &settings {
            for j in 0..8 - 3 {
                assert_eq!(s.axis(j), s.axis(j + 3));
            }
        }
    }

    #[test]
    fn z_measurement_of_neel_is_deterministic() {
        let state = neel_sv(4);
        let setting = BasisSetting::from_word("ZZZZ").unwrap();
        let rec = sample_shots(&state, &setting, 500, 7, &NoiseModel::none()).unwrap();
        assert_eq!(rec.counts.len(), 1);
        assert_eq!(rec.counts.get("1010"), Some(&500));
    }

    #[test]
    fn x_and_y_eigenstates_give_definite_outcomes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = StateVector::from_full(
            1,
            Array1::from(vec![C64::new(h, 0.0), C64::new(h, 0.0)]),
        )
        .unwrap();
        let rec = sample_shots(
            &plus,
            &BasisSetting::from_word("X").unwrap(),
            200,
            3,
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(rec.counts.get("1"), Some(&200));

        let y_plus = StateVector::from_full(
            1,
            Array1::from(vec![C64::new(h, 0.0), C64::new(0.0, h)]),
        )
        .unwrap();
        let rec = sample_shots(
            &y_plus,
            &BasisSetting::from_word("Y").unwrap(),
            200,
            3,
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(rec.counts.get("1"), Some(&200));
        // And the orthogonal outcome appears for the -1 eigenstate.
        let y_minus = StateVector::from_full(
            1,
            Array1::from(vec![C64::new(h, 0.0), C64::new(0.0, -h)]),
        )
        .unwrap();
        let rec = sample_shots(
            &y_minus,
            &BasisSetting::from_word("Y").unwrap(),
            200,
            3,
            &NoiseModel::none(),
        )
        .unwrap();
        assert_eq!(rec.counts.get("0"), Some(&200));
    }

    #[test]
    fn born_frequencies_track_the_quench_distribution() {
        let spec = ChainSpec::power_law(2, 1.6, 1.0, 0.0).unwrap();
        let t = 0.6f64;
        let state = evolve_exact(&spec, &neel_state(2).unwrap(), t).unwrap();
        let setting = BasisSetting::from_word("ZZ").unwrap();
        let shots = 20_000u64;
        let rec = sample_shots(&state, &setting, shots, 11, &NoiseModel::none()).unwrap();
        // Outcomes can only be "10" (up,down) or "01" (down,up).
        assert_eq!(rec.counts.len(), 2);
        let p_updown = *rec.counts.get("10").unwrap() as f64 / shots as f64;
        let want = t.cos().powi(2);
        let sigma = (want * (1.0 - want) / shots as f64).sqrt();
        assert!(
            (p_updown - want).abs() < 5.0 * sigma,
            "frequency {p_updown} vs Born {want}"
        );
    }

    #[test]
    fn depolarizing_noise_flips_outcomes_at_half_p() {
        let state = neel_sv(2);
        let setting = BasisSetting::from_word("ZZ").unwrap();
        let shots = 40_000u64;
        let p = 0.2;
        let rec =
            sample_shots(&state, &setting, shots, 5, &NoiseModel::new(p).unwrap()).unwrap();
        // Site 0 starts up, so <Z_0> = 1 - p under the channel.
        let mean0: f64 = rec
            .counts
            .iter()
            .map(|(o, &c)| {
                let v = if o.as_bytes()[0] == b'1' { 1.0 } else { -1.0 };
                v * c as f64
            })
            .sum::<f64>()
            / shots as f64;
        let want = 1.0 - p;
        let sigma = ((1.0 - want * want) / shots as f64).sqrt();
        assert!((mean0 - want).abs() < 5.0 * sigma, "mean {mean0} vs {want}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let state = neel_sv(3);
        let spec = ChainSpec::power_law(3, 1.6, 1.0, 0.0).unwrap();
        let evolved = evolve_exact(&spec, &neel_state(3).unwrap(), 0.8).unwrap();
        let _ = state;
        let setting = BasisSetting::from_word("XYZ").unwrap();
        let a = sample_shots(&evolved, &setting, 1000, 99, &NoiseModel::none()).unwrap();
        let b = sample_shots(&evolved, &setting, 1000, 99, &NoiseModel::none()).unwrap();
        let c = sample_shots(&evolved, &setting, 1000, 100, &NoiseModel::none()).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn campaign_round_trips_through_jsonl() {
        let spec = ChainSpec::power_law(3, 1.6, 1.0, 0.0).unwrap();
        let state = evolve_exact(&spec, &neel_state(3).unwrap(), 0.5).unwrap();
        let settings = schedule_settings(3, 2).unwrap();
        let records = run_campaign(&state, &settings, 50, 1234, &NoiseModel::none()).unwrap();
        assert_eq!(records.len(), 9);
        let mut buf = Vec::new();
        persist_records(&mut buf, &records).unwrap();
        let back = ingest_records(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(back.iter()) {
            assert_eq!(a.setting.word(), b.setting.word());
            assert_eq!(a.counts, b.counts);
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn campaign_seeds_do_not_depend_on_execution_order() {
        let state = neel_sv(2);
        let settings = schedule_settings(2, 2).unwrap();
        let a = run_campaign(&state, &settings, 100, 7, &NoiseModel::none()).unwrap();
        let b = run_campaign(&state, &settings, 100, 7, &NoiseModel::none()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.counts, y.counts);
        }
    }

    #[test]
    fn ingest_rejects_malformed_streams() {
        let bad_format = "{\"format\":\"shots-v0\",\"setting\":\"ZZ\",\"shots\":1,\"seed\":0,\"noise_p\":0.0,\"counts\":{\"11\":1}}\n";
        assert!(ingest_records(std::io::BufReader::new(bad_format.as_bytes())).is_err());

        let bad_sum = "{\"format\":\"shots-v1\",\"setting\":\"ZZ\",\"shots\":5,\"seed\":0,\"noise_p\":0.0,\"counts\":{\"11\":1}}\n";
        assert!(ingest_records(std::io::BufReader::new(bad_sum.as_bytes())).is_err());

        let bad_outcome = "{\"format\":\"shots-v1\",\"setting\":\"ZZ\",\"shots\":1,\"seed\":0,\"noise_p\":0.0,\"counts\":{\"12\":1}}\n";
        assert!(ingest_records(std::io::BufReader::new(bad_outcome.as_bytes())).is_err());

        let empty = "";
        assert!(ingest_records(std::io::BufReader::new(empty.as_bytes())).is_err());
    }

    #[test]
    fn all_up_product_state_means_match_bloch_vector() {
        // |up> has <X> = <Y> = 0, <Z> = 1: X outcomes are a fair coin.
        let state = StateVector::from_product(&ProductState::all_up(1), false).unwrap();
        let rec = sample_shots(
            &state,
            &BasisSetting::from_word("X").unwrap(),
            10_000,
            21,
            &NoiseModel::none(),
        )
        .unwrap();
        let ups = *rec.counts.get("1").unwrap_or(&0) as f64;
        let frac = ups / 10_000.0;
        assert!((frac - 0.5).abs() < 0.025, "fraction {frac}");
    }
}
