use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use num_complex::Complex64;

use super::band_edges;
use crate::error::{Error, Result};
use crate::signal::{fft_forward, fft_inverse, stft, FrameSpec, RirBank, Waveform, Window, SAMPLE_RATE_HZ};

/// STFT magnitudes of Gaussian noise coloured like a RIR bank, plus their
/// per-band means.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    /// Row-major `n_frames x n_bins`.
    pub magnitudes: Vec<f64>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub band_weights: Vec<f64>,
}

pub const BAND_WEIGHT_FLOOR: f64 = 1e-6;

impl ThetaMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,weight\n");
        for (i, w) in self.band_weights.iter().enumerate() {
            s.push_str(&format!("{i},{w:.12e}\n"));
        }
        s
    }
}

/// Noise whose per-bin variance follows the bank's power profile, analysed
/// with a Hann STFT of `2 (n_bins - 1)` samples at 50% overlap. Magnitudes
/// are scaled by `1 / sqrt(Σ w²)` so white unit-variance noise has unit
/// expected power per bin.
pub fn build_theta(bank: &RirBank, seed: u64, n_frames: usize, n_bins: usize, n: usize) -> Result<ThetaMatrix> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if n_bins < 2 || n_frames == 0 {
        return Err(Error::Dimension(format!("theta needs n_bins >= 2 and n_frames >= 1, got {n_frames}x{n_bins}")));
    }
    if n == 0 || n > n_bins {
        return Err(Error::Dimension(format!("{n} bands over {n_bins} bins")));
    }
    let frame_len = 2 * (n_bins - 1);
    let hop = (frame_len / 2).max(1);
    let len = frame_len + (n_frames - 1) * hop;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    fft_forward(len).process(&mut buf);
    let profile = bank.profile_at(len / 2 + 1);
    for k in 0..=len / 2 {
        let g = profile[k].sqrt();
        buf[k] *= g;
        if k != 0 && len - k != k {
            buf[len - k] *= g;
        }
    }
    fft_inverse(len).process(&mut buf);
    let noise: Vec<f64> = buf.iter().map(|c| c.re / len as f64).collect();

    let spec = FrameSpec::new(frame_len, hop, Window::Hann)?;
    let s = stft(&Waveform::new(noise, SAMPLE_RATE_HZ), spec)?;
    let norm = Window::Hann.coefficients(frame_len).iter().map(|w| w * w).sum::<f64>().sqrt();
    let magnitudes: Vec<f64> = s.magnitudes().iter().map(|m| m / norm).collect();
    debug_assert_eq!(s.n_frames, n_frames);

    let band_weights = band_edges(n_bins, n)
        .into_iter()
        .map(|(lo, hi)| {
            let mut acc = 0.0;
            for t in 0..n_frames {
                acc += magnitudes[t * n_bins + lo..t * n_bins + hi].iter().sum::<f64>();
            }
            (acc / ((hi - lo) * n_frames) as f64).max(BAND_WEIGHT_FLOOR)
        })
        .collect();
    Ok(ThetaMatrix {
        magnitudes,
        n_frames,
        n_bins,
        band_weights,
    })
}
