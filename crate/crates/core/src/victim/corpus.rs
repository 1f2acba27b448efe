use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Transcript, Vocabulary, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, Waveform, SAMPLE_RATE_HZ};

/// Noise floor standard deviation (−40 dB re full scale).
const NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub waveform: Waveform,
    pub transcript: Transcript,
}

/// One keyword segment with seeded level, per-harmonic amplitude and phase
/// jitter over the noise floor.
pub fn synth_segment(vocab: &Vocabulary, token: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sig = &vocab.signatures[token];
    let level = rng.gen_range(0.25..0.45);
    let parts: Vec<(f64, f64, f64)> = sig
        .harmonics
        .iter()
        .enumerate()
        .map(|(h, a)| {
            let amp = a * rng.gen_range(0.9..1.1);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            ((h + 1) as f64 * sig.f0_hz, amp, phase)
        })
        .collect();
    let norm: f64 = parts.iter().map(|p| p.1).sum();
    let w = std::f64::consts::TAU / SAMPLE_RATE_HZ as f64;
    (0..SEGMENT_LEN)
        .map(|n| {
            let tone: f64 = parts.iter().map(|(f, a, p)| a * (w * f * n as f64 + p).sin()).sum();
            let e: f64 = StandardNormal.sample(rng);
            level * tone / norm + NOISE_STD * e
        })
        .collect()
}

/// `n_per_class · K` utterances of `len_range` tokens (inclusive). Utterance
/// `j` opens with keyword `j mod K`; the remaining tokens are uniform.
pub fn synth_corpus(vocab: &Vocabulary, n_per_class: usize, len_range: (usize, usize), seed: u64) -> Result<Vec<Utterance>> {
    if n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!("utterance length range {lo}..={hi}")));
    }
    let k = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * k);
    for j in 0..n_per_class * k {
        let n = rng.gen_range(lo..=hi);
        let mut tokens = vec![j % k];
        tokens.extend((1..n).map(|_| rng.gen_range(0..k)));
        let mut samples = Vec::with_capacity(n * SEGMENT_LEN);
        for &t in &tokens {
            samples.extend(synth_segment(vocab, t, &mut rng));
        }
        out.push(Utterance {
            waveform: Waveform::new(samples, SAMPLE_RATE_HZ),
            transcript: Transcript(tokens),
        });
    }
    Ok(out)
}

/// Writes `utt_NNNN.wav` files and `manifest.txt` (`path tokens...` per line).
pub fn export_corpus(dir: &Path, corpus: &[Utterance], vocab: &Vocabulary) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, u) in corpus.iter().enumerate() {
        let name = format!("utt_{i:04}.wav");
        write_wav(&dir.join(&name), &u.waveform)?;
        manifest.push_str(&name);
        manifest.push(' ');
        manifest.push_str(&vocab.render(&u.transcript));
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn import_corpus(manifest: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(manifest)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (path, rest) = line.split_once(' ').unwrap_or((line, ""));
            Ok(Utterance {
                waveform: read_wav(&base.join(path))?,
                transcript: vocab.parse(rest)?,
            })
        })
        .collect()
}
