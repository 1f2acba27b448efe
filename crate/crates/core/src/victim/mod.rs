//! Toy keyword-sequence transcriber: a synthetic harmonic-stack corpus and a
//! per-segment MFCC classifier with gradients down to the raw samples.

mod corpus;
mod model;

pub use corpus::{export_corpus, import_corpus, synth_corpus, synth_segment, Utterance};
pub use model::{
    load_victim, loss_grad_transcript, save_victim, train_victim, transcribe, victim_loss_and_grad, VictimConfig,
    VictimModel,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SAMPLE_RATE_HZ;

/// Samples per keyword segment (0.25 s at 16 kHz).
pub const SEGMENT_LEN: usize = SAMPLE_RATE_HZ as usize / 4;

/// Minimum spacing between keyword fundamentals.
pub const MIN_F0_SEPARATION_HZ: f64 = 40.0;

/// Acoustic signature of one keyword: a harmonic stack on `f0_hz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub f0_hz: f64,
    /// Relative amplitude of harmonics 1, 2, ...
    pub harmonics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub labels: Vec<String>,
    pub signatures: Vec<Signature>,
}

const NAMES: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
];

impl Vocabulary {
    pub fn new(labels: Vec<String>, signatures: Vec<Signature>) -> Result<Self> {
        if labels.len() != signatures.len() {
            return Err(Error::Vocabulary(format!(
                "{} labels for {} signatures",
                labels.len(),
                signatures.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::Vocabulary("need at least two keywords".into()));
        }
        for (i, s) in signatures.iter().enumerate() {
            if !(s.f0_hz > 0.0) || s.harmonics.is_empty() || s.harmonics.iter().any(|h| !(*h >= 0.0)) {
                return Err(Error::Vocabulary(format!("keyword {i} has an invalid signature")));
            }
            let top = s.f0_hz * s.harmonics.len() as f64;
            if top >= SAMPLE_RATE_HZ as f64 / 2.0 {
                return Err(Error::Vocabulary(format!("keyword {i} has harmonics above Nyquist")));
            }
            for (j, t) in signatures[..i].iter().enumerate() {
                if (s.f0_hz - t.f0_hz).abs() < MIN_F0_SEPARATION_HZ {
                    return Err(Error::Vocabulary(format!(
                        "keywords {j} and {i} are {:.1} Hz apart",
                        (s.f0_hz - t.f0_hz).abs()
                    )));
                }
            }
            if labels[..i].contains(&labels[i]) || labels[i].contains(char::is_whitespace) || labels[i].is_empty() {
                return Err(Error::Vocabulary(format!("bad or duplicate label {:?}", labels[i])));
            }
        }
        Ok(Self { labels, signatures })
    }

    /// `k` keywords with fundamentals 90 Hz apart from 200 Hz and five
    /// harmonics decaying at a keyword-specific rate.
    pub fn standard(k: usize) -> Result<Self> {
        if k < 4 || k > NAMES.len() {
            return Err(Error::Vocabulary(format!("standard vocabulary has 4..={} keywords", NAMES.len())));
        }
        let signatures = (0..k)
            .map(|i| {
                let r = 0.35 + 0.05 * i as f64;
                Signature {
                    f0_hz: 200.0 + 90.0 * i as f64,
                    harmonics: (0..5).map(|h| r.powi(h)).collect(),
                }
            })
            .collect();
        Self::new(NAMES[..k].iter().map(|s| s.to_string()).collect(), signatures)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn render(&self, t: &Transcript) -> String {
        t.0.iter().map(|i| self.labels[*i].as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Transcript> {
        text.split_whitespace()
            .map(|w| self.index_of(w).ok_or_else(|| Error::Vocabulary(format!("unknown keyword {w:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(Transcript)
    }
}

/// Token sequence over a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Transcript(pub Vec<usize>);

impl Transcript {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests;
