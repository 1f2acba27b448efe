use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::{fft_forward, Waveform, Window, SAMPLE_RATE_HZ};

pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;
/// Frames of the clean signal quieter than this (mean square, dBFS) are
/// skipped.
const ACTIVE_FRAME_DB: f64 = -60.0;
const EPS: f64 = 1e-12;

fn check_pair(clean: &Waveform, processed: &Waveform, min_len: usize) -> Result<()> {
    clean.check_compatible(processed)?;
    if clean.len() < min_len {
        return Err(Error::SignalTooShort {
            len: clean.len(),
            needed: min_len,
        });
    }
    Ok(())
}

/// Segmental SNR over non-overlapping frames, each clamped to
/// [`SEG_SNR_FLOOR_DB`, `SEG_SNR_CEIL_DB`].
pub fn seg_snr(clean: &Waveform, processed: &Waveform, frame_len: usize) -> Result<f64> {
    if frame_len == 0 {
        return Err(Error::InvalidFrameSpec("frame_len must be positive".into()));
    }
    check_pair(clean, processed, frame_len)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, p) in clean
        .samples
        .chunks_exact(frame_len)
        .zip(processed.samples.chunks_exact(frame_len))
    {
        let signal: f64 = c.iter().map(|v| v * v).sum();
        if 10.0 * (signal / frame_len as f64).log10() <= ACTIVE_FRAME_DB {
            continue;
        }
        let noise: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = if noise == 0.0 {
            SEG_SNR_CEIL_DB
        } else {
            (10.0 * (signal / noise).log10()).clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)
        };
        total += snr;
        count += 1;
    }
    if count == 0 {
        return Err(Error::SilentReference);
    }
    Ok(total / count as f64)
}

/// Analysis constants of the intelligibility score at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoiParams {
    pub frame_len: usize,
    pub hop_len: usize,
    pub nfft: usize,
    pub n_bands: usize,
    pub min_freq_hz: f64,
    /// Frames per short-time segment (384 ms).
    pub seg_frames: usize,
    pub beta_db: f64,
    pub dyn_range_db: f64,
}

impl Default for StoiParams {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop_len: 256,
            nfft: 1024,
            n_bands: 15,
            min_freq_hz: 150.0,
            seg_frames: 24,
            beta_db: -15.0,
            dyn_range_db: 40.0,
        }
    }
}

impl StoiParams {
    /// Shortest signal with one full segment when no frame is silent.
    pub fn min_len(&self) -> usize {
        self.frame_len + (self.seg_frames - 1) * self.hop_len
    }

    /// `(first_bin, end_bin)` of every one-third octave band.
    fn band_bins(&self) -> Vec<(usize, usize)> {
        let n_bins = self.nfft / 2 + 1;
        let bin_hz = SAMPLE_RATE_HZ as f64 / self.nfft as f64;
        let nearest = |f: f64| ((f / bin_hz).round() as usize).min(n_bins - 1);
        (0..self.n_bands)
            .map(|k| {
                let k = k as f64;
                let lo = self.min_freq_hz * 2f64.powf((2.0 * k - 1.0) / 6.0);
                let hi = self.min_freq_hz * 2f64.powf((2.0 * k + 1.0) / 6.0);
                (nearest(lo), nearest(hi))
            })
            .collect()
    }
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..).map(move |t| t * hop).take_while(move |s| s + frame <= len)
}

/// Drops frames of both signals where the clean one is more than
/// `dyn_range_db` below its loudest frame, then overlap-adds the rest.
fn remove_silent(x: &[f64], y: &[f64], p: &StoiParams, window: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let starts: Vec<usize> = frame_starts(x.len(), p.frame_len, p.hop_len).collect();
    let energy_db = |s: usize| {
        let e: f64 = (0..p.frame_len).map(|i| (x[s + i] * window[i]).powi(2)).sum();
        20.0 * (e.sqrt() + EPS).log10()
    };
    let db: Vec<f64> = starts.iter().map(|&s| energy_db(s)).collect();
    let top = db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&db)
        .filter(|(_, d)| **d > top - p.dyn_range_db)
        .map(|(s, _)| *s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = p.frame_len + (kept.len() - 1) * p.hop_len;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (k, s) in kept.iter().enumerate() {
        let o = k * p.hop_len;
        for i in 0..p.frame_len {
            xs[o + i] += x[s + i] * window[i];
            ys[o + i] += y[s + i] * window[i];
        }
    }
    (xs, ys)
}

/// Band envelopes, `n_frames x n_bands`.
fn third_octave(x: &[f64], p: &StoiParams, window: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let fft = fft_forward(p.nfft);
    let mut buf = vec![Complex64::new(0.0, 0.0); p.nfft];
    frame_starts(x.len(), p.frame_len, p.hop_len)
        .map(|s| {
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < p.frame_len { x[s + i] * window[i] } else { 0.0 };
                *b = Complex64::new(v, 0.0);
            }
            fft.process(&mut buf);
            bands
                .iter()
                .map(|&(lo, hi)| buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

fn centred_unit(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for a in v.iter_mut() {
        *a -= mean;
    }
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt() + EPS;
    for a in v.iter_mut() {
        *a /= norm;
    }
}

/// Short-time objective intelligibility of `processed` against `clean`, both
/// at 16 kHz, with the default analysis constants.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    stoi_with(clean, processed, &StoiParams::default())
}

pub fn stoi_with(clean: &Waveform, processed: &Waveform, p: &StoiParams) -> Result<f64> {
    if clean.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(Error::SampleRateMismatch(clean.sample_rate_hz, SAMPLE_RATE_HZ));
    }
    check_pair(clean, processed, p.min_len())?;
    let window = Window::Hann.coefficients(p.frame_len);
    let (xs, ys) = remove_silent(&clean.samples, &processed.samples, p, &window);
    if xs.len() < p.min_len() {
        return Err(Error::SignalTooShort {
            len: xs.len(),
            needed: p.min_len(),
        });
    }
    let bands = p.band_bins();
    let xb = third_octave(&xs, p, &window, &bands);
    let yb = third_octave(&ys, p, &window, &bands);
    let n = p.seg_frames;
    let clip = 10f64.powf(-p.beta_db / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for end in n..=xb.len() {
        for j in 0..p.n_bands {
            let mut xv: Vec<f64> = (end - n..end).map(|m| xb[m][j]).collect();
            let yv: Vec<f64> = (end - n..end).map(|m| yb[m][j]).collect();
            let xn = xv.iter().map(|a| a * a).sum::<f64>().sqrt();
            let yn = yv.iter().map(|a| a * a).sum::<f64>().sqrt();
            let alpha = xn / (yn + EPS);
            let mut yp: Vec<f64> = yv
                .iter()
                .zip(&xv)
                .map(|(y, x)| (alpha * y).min((1.0 + clip) * x))
                .collect();
            centred_unit(&mut xv);
            centred_unit(&mut yp);
            total += xv.iter().zip(&yp).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}
