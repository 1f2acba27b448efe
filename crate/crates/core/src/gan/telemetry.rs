use serde::{Deserialize, Serialize};

use super::dist;

/// One line of the per-iteration JSONL log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub ipm_value: f64,
    pub sobolev_term: f64,
    pub penalty: f64,
    /// Mean pairwise distance of the generator batch.
    pub diversity: f64,
    /// Critic-update backward passes so far.
    pub gc_cum: u64,
}

/// Mean Euclidean distance over all pairs of `d`-dimensional rows.
pub fn mean_pairwise_distance(values: &[f64], d: usize) -> f64 {
    let rows: Vec<&[f64]> = values.chunks(d).collect();
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..i {
            acc += dist(rows[i], rows[j]);
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

/// Iteration at which the trailing mean of `window` diversities first drops
/// below `floor`.
pub fn detect_collapse(log: &[LogRecord], window: usize, floor: f64) -> Option<usize> {
    if window == 0 || window > log.len() {
        return None;
    }
    let mut sum: f64 = log[..window - 1].iter().map(|r| r.diversity).sum();
    for i in window - 1..log.len() {
        sum += log[i].diversity;
        if sum / (window as f64) < floor {
            return Some(log[i].iter);
        }
        sum -= log[i + 1 - window].diversity;
    }
    None
}

/// Backward passes of each batch.
pub fn gc_increments(log: &[LogRecord]) -> Vec<u64> {
    let mut prev = 0;
    log.iter()
        .map(|r| {
            let d = r.gc_cum - prev;
            prev = r.gc_cum;
            d
        })
        .collect()
}

/// Per-batch backward passes: the largest increment in the log.
pub fn gc_count(log: &[LogRecord]) -> u64 {
    gc_increments(log).into_iter().max().unwrap_or(0)
}
