//! Synthetic dataset generation and the manifest format.
//!
//! A dataset split is a directory of WAV files plus a tab-separated
//! manifest, one record per line: `id <TAB> wav_path <TAB> transcript`
//! with the transcript as space-separated digits. WAV paths are relative
//! to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::audio::{concat_utterance, load_wav, save_wav, Waveform};
use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::features::MfccPipeline;
use crate::hmm::TranscribedUtterance;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
    EvalBenign,
    EvalAdvSrc,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Heldout, Split::EvalBenign, Split::EvalAdvSrc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::EvalBenign => "eval_benign",
            Split::EvalAdvSrc => "eval_adv_src",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            "eval_benign" => Ok(Split::EvalBenign),
            "eval_adv_src" => Ok(Split::EvalAdvSrc),
            other => Err(Error::InvalidConfig { detail: format!("unknown split '{other}'") }),
        }
    }

    pub fn size(&self, cfg: &DatasetConfig) -> usize {
        match self {
            Split::Train => cfg.train_size,
            Split::Heldout => cfg.heldout_size,
            Split::EvalBenign => cfg.eval_benign_size,
            Split::EvalAdvSrc => cfg.eval_adv_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub wav_path: PathBuf,
    pub transcript: Vec<u8>,
}

pub fn parse_transcript(s: &str) -> Result<Vec<u8>> {
    s.split_whitespace()
        .map(|w| {
            w.parse::<u8>().ok().filter(|&d| d <= 9).ok_or_else(|| Error::InvalidConfig {
                detail: format!("transcript word '{w}' is not a digit 0-9"),
            })
        })
        .collect()
}

pub fn transcript_to_string(digits: &[u8]) -> String {
    let mut out = String::new();
    for (i, d) in digits.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{d}");
    }
    out
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            e.id,
            e.wav_path.display(),
            transcript_to_string(&e.transcript)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (id, wav, transcript) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Other(format!(
                    "{}:{}: manifest line needs 3 tab-separated fields",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        entries.push(ManifestEntry {
            id: id.to_string(),
            wav_path: PathBuf::from(wav),
            transcript: parse_transcript(transcript)?,
        });
    }
    Ok(entries)
}

/// Generate one split: WAV files under `<data_dir>/<split>/` plus the
/// manifest `<data_dir>/<split>.tsv`. Deterministic per master seed; ids
/// are namespaced by split so no id can appear in two splits.
pub fn synth_split(
    data_dir: &Path,
    split: Split,
    cfg: &DatasetConfig,
    master_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let wav_dir = data_dir.join(split.as_str());
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let size = split.size(cfg);
    let mut entries = Vec::with_capacity(size);
    for k in 0..size {
        let utt_seed = seed::derive_indexed(master_seed, &format!("data/{}", split.as_str()), k as u64);
        let mut rng = seed::rng(seed::derive(utt_seed, "layout"));
        let len = rng.gen_range(cfg.min_digits..=cfg.max_digits);
        let digits: Vec<u8> = (0..len).map(|_| rng.gen_range(0..10)).collect();
        let (waveform, transcript) = concat_utterance(&digits, utt_seed)?;

        let id = format!("{}-{k:05}", split.as_str());
        let rel = PathBuf::from(split.as_str()).join(format!("{id}.wav"));
        save_wav(&waveform, &data_dir.join(&rel), false)?;
        entries.push(ManifestEntry { id, wav_path: rel, transcript: parse_transcript(&transcript)? });
    }
    write_manifest(&data_dir.join(format!("{}.tsv", split.as_str())), &entries)?;
    Ok(entries)
}

/// Load a split's waveforms.
pub fn load_split_waveforms(data_dir: &Path, split: Split) -> Result<Vec<(ManifestEntry, Waveform)>> {
    let manifest = data_dir.join(format!("{}.tsv", split.as_str()));
    if !manifest.exists() {
        return Err(Error::MissingArtifact {
            path: manifest,
            hint: "run `uqasr synth-data` first".to_string(),
        });
    }
    let entries = read_manifest(&manifest)?;
    entries
        .into_par_iter()
        .map(|e| {
            let w = load_wav(&data_dir.join(&e.wav_path))?;
            Ok((e, w))
        })
        .collect()
}

/// Load a split and run the MFCC front end on every utterance.
pub fn load_split_features(
    data_dir: &Path,
    split: Split,
    pipeline: &MfccPipeline,
) -> Result<Vec<TranscribedUtterance>> {
    let with_wavs = load_split_waveforms(data_dir, split)?;
    with_wavs
        .into_par_iter()
        .map(|(e, w)| {
            Ok(TranscribedUtterance {
                id: e.id,
                feats: pipeline.compute(&w)?,
                transcript: e.transcript,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("uqasr-dataset-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            train_size: 4,
            heldout_size: 3,
            eval_benign_size: 3,
            eval_adv_size: 2,
            min_digits: 1,
            max_digits: 3,
        }
    }

    #[test]
    fn transcript_parsing_round_trips() {
        assert_eq!(parse_transcript("0 9 9").unwrap(), vec![0, 9, 9]);
        assert_eq!(transcript_to_string(&[0, 9, 9]), "0 9 9");
        assert!(parse_transcript("1 x 3").is_err());
        assert!(parse_transcript("12").is_err());
        assert_eq!(parse_transcript("").unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn synth_is_deterministic_and_ids_are_namespaced() {
        let cfg = small_cfg();
        let d1 = tmpdir("synth-a");
        let d2 = tmpdir("synth-b");
        for split in Split::ALL {
            synth_split(&d1, split, &cfg, 7).unwrap();
            synth_split(&d2, split, &cfg, 7).unwrap();
            let m1 = fs::read(d1.join(format!("{}.tsv", split.as_str()))).unwrap();
            let m2 = fs::read(d2.join(format!("{}.tsv", split.as_str()))).unwrap();
            assert_eq!(m1, m2, "{split:?} manifests differ across identical runs");
        }
        // Same-name WAV files byte-identical too.
        let w1 = fs::read(d1.join("train/train-00000.wav")).unwrap();
        let w2 = fs::read(d2.join("train/train-00000.wav")).unwrap();
        assert_eq!(w1, w2);

        // No id appears in two splits.
        let mut all_ids = Vec::new();
        for split in Split::ALL {
            for e in read_manifest(&d1.join(format!("{}.tsv", split.as_str()))).unwrap() {
                all_ids.push(e.id);
            }
        }
        let unique: std::collections::HashSet<_> = all_ids.iter().collect();
        assert_eq!(unique.len(), all_ids.len());
        assert_eq!(all_ids.len(), 4 + 3 + 3 + 2);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = small_cfg();
        let d1 = tmpdir("seed-a");
        let d2 = tmpdir("seed-b");
        synth_split(&d1, Split::Train, &cfg, 7).unwrap();
        synth_split(&d2, Split::Train, &cfg, 8).unwrap();
        let w1 = fs::read(d1.join("train/train-00000.wav")).unwrap();
        let w2 = fs::read(d2.join("train/train-00000.wav")).unwrap();
        assert_ne!(w1, w2);
    }

    #[test]
    fn split_loads_with_features() {
        let cfg = small_cfg();
        let dir = tmpdir("load");
        let entries = synth_split(&dir, Split::Heldout, &cfg, 9).unwrap();
        let pipeline = MfccPipeline::new(FeatureConfig::default()).unwrap();
        let utts = load_split_features(&dir, Split::Heldout, &pipeline).unwrap();
        assert_eq!(utts.len(), entries.len());
        for (u, e) in utts.iter().zip(&entries) {
            assert_eq!(u.id, e.id);
            assert_eq!(u.transcript, e.transcript);
            assert_eq!(u.feats.num_features(), 39);
            assert!(u.feats.num_frames() > 20);
        }
    }

    #[test]
    fn missing_manifest_is_a_missing_artifact() {
        let dir = tmpdir("missing");
        assert!(matches!(
            load_split_waveforms(&dir, Split::Train),
            Err(Error::MissingArtifact { .. })
        ));
    }
}
