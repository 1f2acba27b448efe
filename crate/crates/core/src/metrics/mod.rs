//! Transcription scores (WER, SLA) and signal-quality scores (segSNR, STOI).

mod quality;

pub use quality::{seg_snr, stoi, stoi_with, StoiParams, SEG_SNR_CEIL_DB, SEG_SNR_FLOOR_DB};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::victim::Transcript;

/// Number of predefined adversarial phrases in a campaign; kept as metadata.
pub const N_PHRASES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerCounts {
    pub pct: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Token-level Levenshtein alignment with unit costs. Among minimum-cost
/// alignments the one with the fewest insertions and deletions wins, which
/// fixes the split between substitutions and insert/delete pairs.
pub fn wer(reference: &Transcript, hypothesis: &Transcript) -> Result<WerCounts> {
    let r = &reference.0;
    let h = &hypothesis.0;
    if r.is_empty() {
        return Err(Error::UndefinedWer);
    }
    let (n, m) = (r.len(), h.len());
    // (cost, insertions + deletions, substitutions, insertions)
    type Cell = (usize, usize, usize, usize);
    let mut dp: Vec<Cell> = vec![(0, 0, 0, 0); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        dp[at(i, 0)] = (i, i, 0, 0);
    }
    for j in 1..=m {
        dp[at(0, j)] = (j, j, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let d = dp[at(i - 1, j - 1)];
            let diag = if r[i - 1] == h[j - 1] {
                d
            } else {
                (d.0 + 1, d.1, d.2 + 1, d.3)
            };
            let u = dp[at(i - 1, j)];
            let del = (u.0 + 1, u.1 + 1, u.2, u.3);
            let l = dp[at(i, j - 1)];
            let ins = (l.0 + 1, l.1 + 1, l.2, l.3 + 1);
            let mut best = diag;
            for c in [del, ins] {
                if (c.0, c.1) < (best.0, best.1) {
                    best = c;
                }
            }
            dp[at(i, j)] = best;
        }
    }
    let (cost, indel, substitutions, insertions) = dp[at(n, m)];
    let deletions = indel - insertions;
    Ok(WerCounts {
        pct: cost as f64 / n as f64 * 100.0,
        substitutions,
        insertions,
        deletions,
    })
}

/// Percentage of `(transcript, ground_truth)` pairs that match exactly.
pub fn sla(results: &[(Transcript, Transcript)]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let correct = results.iter().filter(|(t, g)| t == g).count();
    Ok(100.0 * correct as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean of per-utterance WER percentages.
    pub wer_pct: f64,
    pub sla_pct: f64,
    pub seg_snr_db: Option<f64>,
    pub stoi: Option<f64>,
    pub n_correct: usize,
    pub n_total: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_phrases: usize,
}

impl MetricsReport {
    /// Scores `(transcript, ground_truth)` pairs; the quality scores are
    /// averaged by the caller over whatever pairs they apply to.
    pub fn from_transcripts(results: &[(Transcript, Transcript)], seg_snr_db: Option<f64>, stoi: Option<f64>) -> Result<Self> {
        let sla_pct = sla(results)?;
        let mut wer_sum = 0.0;
        let (mut s, mut i, mut d) = (0, 0, 0);
        for (hyp, truth) in results {
            let c = wer(truth, hyp)?;
            wer_sum += c.pct;
            s += c.substitutions;
            i += c.insertions;
            d += c.deletions;
        }
        Ok(Self {
            wer_pct: wer_sum / results.len() as f64,
            sla_pct,
            seg_snr_db,
            stoi,
            n_correct: results.iter().filter(|(t, g)| t == g).count(),
            n_total: results.len(),
            substitutions: s,
            insertions: i,
            deletions: d,
            n_phrases: N_PHRASES,
        })
    }
}

#[cfg(test)]
mod tests;
