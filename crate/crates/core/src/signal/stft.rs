use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{fft_forward, fft_inverse, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub frame_len: usize,
    pub hop_len: usize,
    pub window: Window,
}

impl FrameSpec {
    pub fn new(frame_len: usize, hop_len: usize, window: Window) -> Result<Self> {
        let spec = Self {
            frame_len,
            hop_len,
            window,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.frame_len.is_power_of_two() {
            return Err(Error::InvalidFrameSpec(format!(
                "frame_len {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop_len == 0 || self.hop_len > self.frame_len {
            return Err(Error::InvalidFrameSpec(format!(
                "hop_len {} must be in 1..={}",
                self.hop_len, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        if signal_len < self.frame_len {
            0
        } else {
            1 + (signal_len - self.frame_len) / self.hop_len
        }
    }
}

/// One-sided STFT, stored row-major as `n_frames x n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Vec<Complex64>,
    pub n_frames: usize,
    pub spec: FrameSpec,
    pub sample_rate_hz: u32,
    /// Length of the analysed signal, used to size the reconstruction.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.spec.n_bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let nb = self.n_bins();
        &self.bins[t * nb..(t + 1) * nb]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let nb = self.n_bins();
        &mut self.bins[t * nb..(t + 1) * nb]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

pub fn stft(w: &Waveform, spec: FrameSpec) -> Result<Spectrogram> {
    spec.validate()?;
    if w.len() < spec.frame_len {
        return Err(Error::SignalTooShort {
            len: w.len(),
            needed: spec.frame_len,
        });
    }
    let n_frames = spec.n_frames(w.len());
    let n_bins = spec.n_bins();
    let window = spec.window.coefficients(spec.frame_len);
    let fft = fft_forward(spec.frame_len);
    let mut bins = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); spec.frame_len];
    for t in 0..n_frames {
        let start = t * spec.hop_len;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Spectrogram {
        bins,
        n_frames,
        spec,
        sample_rate_hz: w.sample_rate_hz,
        signal_len: w.len(),
    })
}

/// Weighted overlap-add inverse. Each output sample is normalised by the sum of
/// squared windows covering it, so reconstruction is exact wherever that sum
/// is non-negligible; samples not covered by any frame are zero.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    s.spec
        .validate()
        .map_err(|e| Error::InconsistentSpectrogram(e.to_string()))?;
    let n_bins = s.n_bins();
    if s.bins.len() != s.n_frames * n_bins {
        return Err(Error::InconsistentSpectrogram(format!(
            "{} bins for {} frames of {} bins",
            s.bins.len(),
            s.n_frames,
            n_bins
        )));
    }
    let n = s.spec.frame_len;
    let covered = if s.n_frames == 0 {
        0
    } else {
        n + (s.n_frames - 1) * s.spec.hop_len
    };
    if covered > s.signal_len {
        return Err(Error::InconsistentSpectrogram(format!(
            "frames cover {} samples but signal_len is {}",
            covered, s.signal_len
        )));
    }
    let window = s.spec.window.coefficients(n);
    let ifft = fft_inverse(n);
    let mut out = vec![0.0; s.signal_len];
    let mut norm = vec![0.0; s.signal_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..s.n_frames {
        let frame = s.frame(t);
        buf[..n_bins].copy_from_slice(frame);
        for k in n_bins..n {
            buf[k] = frame[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * s.spec.hop_len;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let peak_norm = norm.iter().cloned().fold(0.0, f64::max);
    let floor = peak_norm * 1e-8;
    for (o, w2) in out.iter_mut().zip(&norm) {
        if *w2 > floor {
            *o /= *w2;
        } else {
            *o = 0.0;
        }
    }
    Ok(Waveform::new(out, s.sample_rate_hz))
}
