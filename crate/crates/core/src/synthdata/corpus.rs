//! Corpus directories: one TNSR file per array plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{phone_index_at, Utterance, RATE};
use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, MelState};
use crate::numcore::io;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    /// Space separated phoneme symbols, `p00 p07 …`.
    pub phonemes: String,
    pub durations: Vec<usize>,
    pub mel: String,
    pub ppg: String,
    /// Native-speaker rendering of the same script, if exported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub language_seed: u64,
    pub speaker: Speaker,
    pub corpus_seed: u64,
    pub n_phonemes: usize,
    pub ppg_dim: usize,
    pub utterances: Vec<CorpusEntry>,
}

pub fn phoneme_symbol(p: usize) -> String {
    format!("p{p:02}")
}

pub fn parse_phonemes(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|tok| {
            tok.strip_prefix('p')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::format(format!("bad phoneme symbol {tok:?}")))
        })
        .collect()
}

/// Writes `utts` (and optional native references) under `dir`.
pub fn save_corpus(
    dir: &Path,
    utts: &[Utterance],
    native_refs: Option<&[MelSpectrogram]>,
    meta: (u64, Speaker, u64, usize, usize),
) -> Result<CorpusManifest> {
    let (language_seed, speaker, corpus_seed, n_phonemes, ppg_dim) = meta;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let id = format!("utt{i:04}");
        let mel = format!("{id}.mel.tnsr");
        let ppg = format!("{id}.ppg.tnsr");
        io::save_tensor(dir.join(&mel), u.mel.frames())?;
        io::save_tensor(dir.join(&ppg), &u.ppg)?;
        let native_ref = match native_refs {
            Some(refs) => {
                let name = format!("{id}.ref.tnsr");
                io::save_tensor(dir.join(&name), refs[i].frames())?;
                Some(name)
            }
            None => None,
        };
        entries.push(CorpusEntry {
            id,
            phonemes: u
                .phonemes
                .iter()
                .map(|&p| phoneme_symbol(p))
                .collect::<Vec<_>>()
                .join(" "),
            durations: u.durations.clone(),
            mel,
            ppg,
            native_ref,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        language_seed,
        speaker,
        corpus_seed,
        n_phonemes,
        ppg_dim,
        utterances: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A loaded utterance together with its native reference mel, if present.
pub type LoadedUtterance = (Utterance, Option<MelSpectrogram>);

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<LoadedUtterance>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(format!(
            "unsupported corpus manifest version {}",
            manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.utterances.len());
    for e in &manifest.utterances {
        let phonemes = parse_phonemes(&e.phonemes)?;
        if phonemes.len() != e.durations.len() || phonemes.is_empty() {
            return Err(Error::format(format!("{}: phonemes and durations disagree", e.id)));
        }
        let mel = MelSpectrogram::new(io::load_tensor(dir.join(&e.mel))?, MelState::Normalized)?;
        let ppg = io::load_tensor(dir.join(&e.ppg))?;
        let t_mel: usize = e.durations.iter().sum();
        if mel.len() != t_mel || ppg.rows() != t_mel.div_ceil(RATE) || ppg.cols() != manifest.ppg_dim {
            return Err(Error::format(format!(
                "{}: array lengths do not match durations",
                e.id
            )));
        }
        let oracle_align = (0..ppg.rows())
            .map(|k| phone_index_at(&e.durations, (RATE * k + 1).min(t_mel - 1)))
            .collect();
        let native = match &e.native_ref {
            Some(f) => Some(MelSpectrogram::new(
                io::load_tensor(dir.join(f))?,
                MelState::Normalized,
            )?),
            None => None,
        };
        out.push((
            Utterance {
                phonemes,
                durations: e.durations.clone(),
                mel,
                ppg,
                oracle_align,
            },
            native,
        ));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_corpus, gen_language, native_reference};

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let lang = gen_language(1);
        let utts = gen_corpus(&lang, 3, 2, 2..=4).unwrap();
        let refs: Vec<_> = utts
            .iter()
            .enumerate()
            .map(|(i, u)| native_reference(&lang, u, i as u64).unwrap())
            .collect();
        save_corpus(dir.path(), &utts, Some(&refs), (1, Speaker::A, 2, 12, 87)).unwrap();
        let (m, back) = load_corpus(dir.path()).unwrap();
        assert_eq!(m.utterances.len(), 3);
        assert_eq!(m.speaker, Speaker::A);
        for ((u, r), (orig, oref)) in back.iter().zip(utts.iter().zip(&refs)) {
            assert_eq!(u, orig);
            assert_eq!(r.as_ref(), Some(oref));
        }
    }

    #[test]
    fn phoneme_symbols() {
        assert_eq!(parse_phonemes("p00 p11 p03").unwrap(), vec![0, 11, 3]);
        assert!(parse_phonemes("x1").is_err());
    }
}
