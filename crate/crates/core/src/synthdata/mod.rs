//! Seeded toy corpora: phoneme sequences with matching PPGs, mels and
//! oracle alignments.
//!
//! PPG frames run at one third of the mel frame rate (`T_ppg = ceil(T_mel/3)`),
//! the same mismatch produced by skip-3 frame stacking on the ASR side. PPG
//! frame `k` is centred on mel frame `3k + 1`.

mod corpus;

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use corpus::{load_corpus, parse_phonemes, phoneme_symbol, save_corpus, CorpusEntry, CorpusManifest, Speaker};

use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, MelState, MEL_DIM, NORM_HIGH, NORM_LOW};
use crate::numcore::Tensor;

pub const DEFAULT_PHONEMES: usize = 12;
pub const PPG_DIM: usize = 87;
/// Mel frames per PPG frame.
pub const RATE: usize = 3;
pub const MEL_NOISE_STD: f64 = 0.05;
pub const DURATION_RANGE: RangeInclusive<usize> = 3..=9;
/// Weight of the phoneme's confusion row in a PPG frame; the rest is noise.
pub const PPG_SIGNAL: f64 = 0.9;
const TEMPLATE_DEVIATION_STD: f64 = 0.6;

/// Mixes a base seed with a stream index (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A toy phone set: one mel template per phoneme and a row-stochastic map
/// from phonemes to PPG classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLanguage {
    pub seed: u64,
    pub n_phonemes: usize,
    pub ppg_dim: usize,
    /// `[n_phonemes × 80]`, on the normalized mel scale.
    pub mel_templates: Tensor,
    /// `[n_phonemes × ppg_dim]`, rows sum to 1.
    pub confusion: Tensor,
}

pub fn gen_language(seed: u64) -> ToyLanguage {
    gen_language_with(seed, DEFAULT_PHONEMES, PPG_DIM).expect("default sizes are valid")
}

pub fn gen_language_with(seed: u64, n_phonemes: usize, ppg_dim: usize) -> Result<ToyLanguage> {
    if n_phonemes < 2 || ppg_dim < n_phonemes + 2 {
        return Err(Error::contract(format!(
            "need ≥ 2 phonemes and ppg_dim ≥ n_phonemes + 2 (got {n_phonemes}, {ppg_dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1a4e));
    let dev = Normal::new(0.0, TEMPLATE_DEVIATION_STD).unwrap();

    // Shared smooth spectral envelope plus an independent deviation per phoneme.
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let envelope: Vec<f64> = (0..MEL_DIM)
        .map(|d| {
            let x = d as f64 / MEL_DIM as f64;
            0.8 * (std::f64::consts::TAU * 1.5 * x + phase).cos() - 1.0 * x + 0.5
        })
        .collect();
    let mut templates = Vec::with_capacity(n_phonemes * MEL_DIM);
    for _ in 0..n_phonemes {
        for e in &envelope {
            templates.push((e + dev.sample(&mut rng)).clamp(-3.5, 3.5));
        }
    }

    let mut dims: Vec<usize> = (0..ppg_dim).collect();
    dims.shuffle(&mut rng);
    let mut confusion = vec![0.0; n_phonemes * ppg_dim];
    for p in 0..n_phonemes {
        let row = &mut confusion[p * ppg_dim..(p + 1) * ppg_dim];
        let primary = dims[p];
        let primary_mass = rng.gen_range(0.6..0.8);
        row[primary] = primary_mass;
        // two distinct secondary classes outside the primary set
        let mut secondary = [0usize; 2];
        for s in 0..2 {
            loop {
                let c = dims[rng.gen_range(n_phonemes..ppg_dim)];
                if s == 0 || c != secondary[0] {
                    secondary[s] = c;
                    break;
                }
            }
        }
        let split = rng.gen_range(0.3..0.7);
        row[secondary[0]] += (1.0 - primary_mass) * split;
        row[secondary[1]] += (1.0 - primary_mass) * (1.0 - split);
    }

    Ok(ToyLanguage {
        seed,
        n_phonemes,
        ppg_dim,
        mel_templates: Tensor::new(vec![n_phonemes, MEL_DIM], templates)?,
        confusion: Tensor::new(vec![n_phonemes, ppg_dim], confusion)?,
    })
}

impl ToyLanguage {
    /// Same phone set and PPG map, templates shifted by `N(0, scale²)`:
    /// a second speaker of the same language.
    pub fn perturbed(&self, seed: u64, scale: f64) -> ToyLanguage {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xb0b));
        let noise = Normal::new(0.0, scale.max(0.0)).unwrap();
        let templates = self
            .mel_templates
            .map(|v| (v + noise.sample(&mut rng)).clamp(-3.5, 3.5));
        ToyLanguage {
            seed,
            mel_templates: templates,
            ..self.clone()
        }
    }

    pub fn template(&self, p: usize) -> &[f64] {
        self.mel_templates.row(p)
    }

    /// Support (non-zero entries) of a phoneme's confusion row.
    pub fn support(&self, p: usize) -> Vec<usize> {
        self.confusion
            .row(p)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<usize>,
    /// Mel frames per phoneme.
    pub durations: Vec<usize>,
    pub mel: MelSpectrogram,
    /// `[T_ppg × ppg_dim]`, rows on the simplex.
    pub ppg: Tensor,
    /// Per PPG frame, the index (into `phonemes`) of the phoneme active at
    /// the frame's mel-time centre.
    pub oracle_align: Vec<usize>,
}

impl Utterance {
    pub fn t_mel(&self) -> usize {
        self.mel.len()
    }

    pub fn t_ppg(&self) -> usize {
        self.ppg.rows()
    }

    /// Index into `phonemes` of the phoneme covering mel frame `frame`.
    pub fn phone_index_at(&self, frame: usize) -> usize {
        phone_index_at(&self.durations, frame)
    }

    /// Expected encoder (PPG) position for each decoder step emitting `r`
    /// frames, i.e. the centre of the step's frames in PPG-frame units.
    pub fn attention_oracle(&self, r: usize) -> Vec<f64> {
        let steps = self.t_mel().div_ceil(r);
        let last = (self.t_ppg() - 1) as f64;
        (0..steps)
            .map(|i| {
                let centre = (i * r) as f64 + (r as f64 - 1.0) / 2.0;
                ((centre - 1.0) / RATE as f64).clamp(0.0, last)
            })
            .collect()
    }
}

fn phone_index_at(durations: &[usize], frame: usize) -> usize {
    let mut end = 0;
    for (i, d) in durations.iter().enumerate() {
        end += d;
        if frame < end {
            return i;
        }
    }
    durations.len() - 1
}

/// Phone count and per-phone duration ranges for utterance generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceSpec {
    pub phones: RangeInclusive<usize>,
    pub durations: RangeInclusive<usize>,
}

impl UtteranceSpec {
    pub fn new(min_phones: usize, max_phones: usize) -> Self {
        UtteranceSpec {
            phones: min_phones..=max_phones,
            durations: DURATION_RANGE,
        }
    }
}

pub fn gen_utterance(lang: &ToyLanguage, seed: u64, min_phones: usize, max_phones: usize) -> Result<Utterance> {
    gen_utterance_with(lang, seed, &UtteranceSpec::new(min_phones, max_phones))
}

pub fn gen_utterance_with(lang: &ToyLanguage, seed: u64, spec: &UtteranceSpec) -> Result<Utterance> {
    let (lo, hi) = (*spec.phones.start(), *spec.phones.end());
    let (dlo, dhi) = (*spec.durations.start(), *spec.durations.end());
    if lo == 0 || lo > hi || dlo == 0 || dlo > dhi {
        return Err(Error::contract(format!(
            "need 1 ≤ min_phones ≤ max_phones and 1 ≤ min_dur ≤ max_dur (got {lo}..={hi}, {dlo}..={dhi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x07));
    let n = rng.gen_range(lo..=hi);
    let phonemes = sample_phonemes(lang, &mut rng, n);
    let durations: Vec<usize> = (0..n).map(|_| rng.gen_range(dlo..=dhi)).collect();
    render(lang, phonemes, durations, &mut rng)
}

/// An utterance with exactly `t_ppg` PPG frames (`T_mel = 3·t_ppg`).
pub fn gen_utterance_of_length(lang: &ToyLanguage, seed: u64, t_ppg: usize) -> Result<Utterance> {
    if t_ppg == 0 {
        return Err(Error::contract("t_ppg must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1e9));
    let target = RATE * t_ppg;
    let mut durations = Vec::new();
    let mut total = 0;
    while total < target {
        let d = rng.gen_range(DURATION_RANGE).min(target - total);
        durations.push(d);
        total += d;
    }
    let phonemes = sample_phonemes(lang, &mut rng, durations.len());
    render(lang, phonemes, durations, &mut rng)
}

/// Phoneme ids without immediate repeats, so every boundary is audible.
fn sample_phonemes(lang: &ToyLanguage, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = loop {
            let p = rng.gen_range(0..lang.n_phonemes);
            if out.last() != Some(&p) {
                break p;
            }
        };
        out.push(p);
    }
    out
}

/// Renders mel frames for a fixed phoneme/duration script.
pub fn render_mel(lang: &ToyLanguage, phonemes: &[usize], durations: &[usize], rng: &mut impl Rng) -> Result<MelSpectrogram> {
    if phonemes.len() != durations.len() || phonemes.is_empty() {
        return Err(Error::contract("phonemes and durations must be non-empty and aligned"));
    }
    let noise = Normal::new(0.0, MEL_NOISE_STD).unwrap();
    let t_mel: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(t_mel * MEL_DIM);
    for (&p, &d) in phonemes.iter().zip(durations) {
        if p >= lang.n_phonemes {
            return Err(Error::Vocabulary {
                id: p,
                vocab: lang.n_phonemes,
            });
        }
        for _ in 0..d {
            for &v in lang.template(p) {
                data.push((v + noise.sample(rng)).clamp(NORM_LOW, NORM_HIGH));
            }
        }
    }
    MelSpectrogram::new(Tensor::new(vec![t_mel, MEL_DIM], data)?, MelState::Normalized)
}

fn render(lang: &ToyLanguage, phonemes: Vec<usize>, durations: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    let mel = render_mel(lang, &phonemes, &durations, rng)?;
    let t_mel = mel.len();
    let t_ppg = t_mel.div_ceil(RATE);
    let mut ppg = Vec::with_capacity(t_ppg * lang.ppg_dim);
    let mut oracle = Vec::with_capacity(t_ppg);
    for k in 0..t_ppg {
        let centre = (RATE * k + 1).min(t_mel - 1);
        let idx = phone_index_at(&durations, centre);
        oracle.push(idx);
        let u: Vec<f64> = (0..lang.ppg_dim).map(|_| rng.gen::<f64>()).collect();
        let z: f64 = u.iter().sum();
        for (c, ui) in lang.confusion.row(phonemes[idx]).iter().zip(&u) {
            ppg.push(PPG_SIGNAL * c + (1.0 - PPG_SIGNAL) * ui / z);
        }
    }
    Ok(Utterance {
        phonemes,
        durations,
        mel,
        ppg: Tensor::new(vec![t_ppg, lang.ppg_dim], ppg)?,
        oracle_align: oracle,
    })
}

/// Second noise realisation of `utt`'s phoneme script spoken with `native`'s
/// templates; stands in for a native TTS rendering of the same text.
pub fn native_reference(native: &ToyLanguage, utt: &Utterance, seed: u64) -> Result<MelSpectrogram> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4ef));
    render_mel(native, &utt.phonemes, &utt.durations, &mut rng)
}

/// Template shift of the second toy speaker relative to the first.
pub const SPEAKER_B_SCALE: f64 = 0.3;

/// The toy language as spoken by `speaker`. Speaker A is the base language;
/// speaker B shares its phone set and PPG map with perturbed templates.
pub fn speaker_language(language_seed: u64, speaker: Speaker) -> ToyLanguage {
    let base = gen_language(language_seed);
    match speaker {
        Speaker::A => base,
        Speaker::B => base.perturbed(derive_seed(language_seed, 0xb), SPEAKER_B_SCALE),
    }
}

/// `n` utterances whose phone counts lie in `length_range`.
pub fn gen_corpus(lang: &ToyLanguage, n: usize, seed: u64, length_range: RangeInclusive<usize>) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(Error::contract("corpus size must be ≥ 1"));
    }
    let spec = UtteranceSpec {
        phones: length_range,
        durations: DURATION_RANGE,
    };
    (0..n)
        .map(|i| gen_utterance_with(lang, derive_seed(seed, i as u64 + 1), &spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn language_is_deterministic_and_valid() {
        let a = gen_language(3);
        assert_eq!(a, gen_language(3));
        assert_ne!(a.mel_templates, gen_language(4).mel_templates);
        for p in 0..a.n_phonemes {
            let s: f64 = a.confusion.row(p).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn smallest_utterance() {
        let lang = gen_language(0);
        let spec = UtteranceSpec {
            phones: 1..=1,
            durations: 3..=3,
        };
        let u = gen_utterance_with(&lang, 5, &spec).unwrap();
        assert_eq!((u.t_mel(), u.t_ppg()), (3, 1));
        assert_eq!(u.oracle_align, vec![0]);
    }

    #[test]
    fn bad_phone_range_rejected() {
        let lang = gen_language(0);
        assert!(gen_utterance(&lang, 0, 0, 3).is_err());
        assert!(gen_utterance(&lang, 0, 4, 3).is_err());
        assert!(gen_corpus(&lang, 0, 0, 1..=2).is_err());
    }

    #[test]
    fn exact_length_utterances() {
        let lang = gen_language(1);
        for t in [1, 7, 20, 61] {
            let u = gen_utterance_of_length(&lang, t as u64, t).unwrap();
            assert_eq!(u.t_ppg(), t);
            assert_eq!(u.t_mel(), 3 * t);
        }
    }

    #[test]
    fn attention_oracle_follows_the_frame_rate() {
        let lang = gen_language(1);
        let u = gen_utterance_of_length(&lang, 0, 10).unwrap();
        let o = u.attention_oracle(2);
        assert_eq!(o.len(), 15);
        assert_eq!(o[0], 0.0);
        assert!((o[4] - 7.5 / 3.0).abs() < 1e-12);
        assert!(o.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perturbed_speaker_shares_the_ppg_map() {
        let a = gen_language(2);
        let b = a.perturbed(9, 0.3);
        assert_eq!(a.confusion, b.confusion);
        assert!(a.mel_templates.max_abs_diff(&b.mel_templates) > 0.1);
    }
}
