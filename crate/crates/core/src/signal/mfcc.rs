use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{fft_forward, fft_inverse, FrameSpec, Waveform, Window, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

/// Cepstral coefficients, row-major `n_frames x n_coeffs`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_coeffs: usize,
}

impl MfccSequence {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_coeffs..(t + 1) * self.n_coeffs]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub spec: FrameSpec,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub sample_rate_hz: u32,
    pub log_floor: f64,
    /// Added to every |X|^2 so the power map stays smooth at zero.
    pub power_eps: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            spec: FrameSpec {
                frame_len: 512,
                hop_len: 128,
                window: Window::Hann,
            },
            n_mels: 26,
            n_coeffs: 13,
            sample_rate_hz: SAMPLE_RATE_HZ,
            log_floor: 1e-10,
            power_eps: 1e-12,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-style mel filters spanning 0 Hz to Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `n_mels x n_bins`.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, frame_len: usize, sample_rate_hz: u32) -> Self {
        let n_bins = frame_len / 2 + 1;
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / frame_len as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            n_mels,
            n_bins,
            weights,
        }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Orthonormal DCT-II of `x`, keeping the first `n_out` coefficients.
pub fn dct_ii_ortho(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len();
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                    .sum::<f64>()
        })
        .collect()
}

fn dct_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for i in 0..n_in {
            m[k * n_in + i] =
                scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n_in) as f64).cos();
        }
    }
    m
}

/// Intermediates kept by [`MfccFrontEnd::forward_cached`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct MfccCache {
    signal_len: usize,
    n_frames: usize,
    spectra: Vec<Complex64>,
    mel: Vec<f64>,
}

/// Differentiable waveform-to-MFCC map: power spectrum, mel filterbank,
/// floored log, orthonormal DCT-II.
#[derive(Debug, Clone)]
pub struct MfccFrontEnd {
    pub config: MfccConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    dct: Vec<f64>,
}

impl MfccFrontEnd {
    pub fn new(config: MfccConfig) -> Result<Self> {
        config.spec.validate()?;
        if config.n_coeffs == 0 || config.n_coeffs > config.n_mels {
            return Err(Error::Config(format!(
                "n_coeffs {} must be in 1..={}",
                config.n_coeffs, config.n_mels
            )));
        }
        Ok(Self {
            filterbank: MelFilterbank::new(
                config.n_mels,
                config.spec.frame_len,
                config.sample_rate_hz,
            ),
            window: config.spec.window.coefficients(config.spec.frame_len),
            dct: dct_matrix(config.n_mels, config.n_coeffs),
            config,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        self.config.spec.n_frames(signal_len)
    }

    /// Log-mel energies (`n_frames x n_mels`) of `samples`.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Vec<f64>> {
        let cache = self.analyse(samples)?;
        Ok(cache
            .mel
            .iter()
            .map(|m| (m + self.config.log_floor).ln())
            .collect())
    }

    fn analyse(&self, samples: &[f64]) -> Result<MfccCache> {
        let spec = self.config.spec;
        if samples.len() < spec.frame_len {
            return Err(Error::SignalTooShort {
                len: samples.len(),
                needed: spec.frame_len,
            });
        }
        let n = spec.frame_len;
        let n_bins = spec.n_bins();
        let n_mels = self.config.n_mels;
        let n_frames = spec.n_frames(samples.len());
        let fft = fft_forward(n);
        let mut spectra = Vec::with_capacity(n_frames * n_bins);
        let mut mel = vec![0.0; n_frames * n_mels];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * spec.hop_len;
            for i in 0..n {
                buf[i] = Complex64::new(samples[start + i] * self.window[i], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..n_bins {
                power[k] = buf[k].norm_sqr() + self.config.power_eps;
            }
            spectra.extend_from_slice(&buf[..n_bins]);
            self.filterbank
                .apply(&power, &mut mel[t * n_mels..(t + 1) * n_mels]);
        }
        Ok(MfccCache {
            signal_len: samples.len(),
            n_frames,
            spectra,
            mel,
        })
    }

    pub fn forward(&self, samples: &[f64]) -> Result<MfccSequence> {
        Ok(self.forward_cached(samples)?.0)
    }

    pub fn forward_cached(&self, samples: &[f64]) -> Result<(MfccSequence, MfccCache)> {
        let cache = self.analyse(samples)?;
        let n_mels = self.config.n_mels;
        let n_coeffs = self.config.n_coeffs;
        let mut frames = vec![0.0; cache.n_frames * n_coeffs];
        let mut logmel = vec![0.0; n_mels];
        for t in 0..cache.n_frames {
            for (m, l) in logmel.iter_mut().enumerate() {
                *l = (cache.mel[t * n_mels + m] + self.config.log_floor).ln();
            }
            for k in 0..n_coeffs {
                frames[t * n_coeffs + k] = self.dct[k * n_mels..(k + 1) * n_mels]
                    .iter()
                    .zip(&logmel)
                    .map(|(d, l)| d * l)
                    .sum();
            }
        }
        Ok((
            MfccSequence {
                frames,
                n_frames: cache.n_frames,
                n_coeffs,
            },
            cache,
        ))
    }

    /// Gradient with respect to the input samples given the gradient with
    /// respect to every MFCC coefficient (`n_frames x n_coeffs`).
    pub fn backward(&self, cache: &MfccCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let n_mels = self.config.n_mels;
        let n_coeffs = self.config.n_coeffs;
        if upstream.len() != cache.n_frames * n_coeffs {
            return Err(Error::LengthMismatch(
                upstream.len(),
                cache.n_frames * n_coeffs,
            ));
        }
        let spec = self.config.spec;
        let n = spec.frame_len;
        let n_bins = spec.n_bins();
        let ifft = fft_inverse(n);
        let mut grad = vec![0.0; cache.signal_len];
        let mut g_log = vec![0.0; n_mels];
        let mut g_pow = vec![0.0; n_bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..cache.n_frames {
            let up = &upstream[t * n_coeffs..(t + 1) * n_coeffs];
            for (m, g) in g_log.iter_mut().enumerate() {
                let dlog: f64 = (0..n_coeffs).map(|k| up[k] * self.dct[k * n_mels + m]).sum();
                *g = dlog / (cache.mel[t * n_mels + m] + self.config.log_floor);
            }
            for (k, g) in g_pow.iter_mut().enumerate() {
                *g = (0..n_mels)
                    .map(|m| g_log[m] * self.filterbank.weights[m * n_bins + k])
                    .sum();
            }
            // d/dy_n of sum_k g_k |X_k|^2 = Re sum_k 2 g_k X_k e^{+i 2 pi k n / N}
            let spectra = &cache.spectra[t * n_bins..(t + 1) * n_bins];
            for k in 0..n {
                buf[k] = if k < n_bins {
                    spectra[k] * (2.0 * g_pow[k])
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            ifft.process(&mut buf);
            let start = t * spec.hop_len;
            for i in 0..n {
                grad[start + i] += buf[i].re * self.window[i];
            }
        }
        Ok(grad)
    }
}

/// MFCCs of `w` with the given framing, mel band count and coefficient count.
pub fn mfcc(w: &Waveform, spec: FrameSpec, n_mels: usize, n_coeffs: usize) -> Result<MfccSequence> {
    let front = MfccFrontEnd::new(MfccConfig {
        spec,
        n_mels,
        n_coeffs,
        sample_rate_hz: w.sample_rate_hz,
        ..MfccConfig::default()
    })?;
    front.forward(&w.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_spec() -> FrameSpec {
        MfccConfig::default().spec
    }

    fn tone(freq: f64, len: usize) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SAMPLE_RATE_HZ as f64).sin())
                .collect(),
            SAMPLE_RATE_HZ,
        )
    }

    #[test]
    fn silence_gives_identical_frames() {
        let m = mfcc(&Waveform::zeros(2048, SAMPLE_RATE_HZ), default_spec(), 26, 13).unwrap();
        for t in 1..m.n_frames {
            assert_eq!(m.frame(t), m.frame(0));
        }
    }

    #[test]
    fn octave_apart_tones_differ() {
        let a = mfcc(&tone(440.0, 2048), default_spec(), 26, 13).unwrap();
        let b = mfcc(&tone(880.0, 2048), default_spec(), 26, 13).unwrap();
        let d: f64 = a
            .frame(2)
            .iter()
            .zip(b.frame(2))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d > 1.0, "distance {d}");
    }

    #[test]
    fn doubling_amplitude_shifts_only_c0() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Waveform::new(
            (0..4096).map(|_| rng.gen_range(-0.3..0.3)).collect(),
            SAMPLE_RATE_HZ,
        );
        let a = mfcc(&w, default_spec(), 26, 13).unwrap();
        let b = mfcc(&w.scaled(2.0), default_spec(), 26, 13).unwrap();
        // log(4 E) = log 4 + log E in every band; the DCT maps a constant offset to c0 only
        let expected_shift = 4f64.ln() * (26f64).sqrt();
        for t in 0..a.n_frames {
            assert!((b.frame(t)[0] - a.frame(t)[0] - expected_shift).abs() < 1e-6);
            for k in 1..13 {
                assert!((b.frame(t)[k] - a.frame(t)[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_too_many_coefficients() {
        let err = mfcc(&Waveform::zeros(1024, SAMPLE_RATE_HZ), default_spec(), 10, 13);
        assert!(err.is_err());
    }

    #[test]
    fn dct_matches_matrix_form() {
        let x = [0.3, -1.0, 2.5, 0.0, 0.7];
        let m = dct_matrix(5, 5);
        let y = dct_ii_ortho(&x, 5);
        for k in 0..5 {
            let z: f64 = (0..5).map(|i| m[k * 5 + i] * x[i]).sum();
            assert!((z - y[k]).abs() < 1e-12);
        }
        // orthonormal: energy preserved
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().map(|v| v * v).sum();
        assert!((ex - ey).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let front = MfccFrontEnd::new(MfccConfig {
            spec: FrameSpec::new(128, 32, Window::Hann).unwrap(),
            n_mels: 12,
            n_coeffs: 6,
            ..MfccConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..400).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (seq, cache) = front.forward_cached(&x).unwrap();
        let up: Vec<f64> = (0..seq.frames.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = front.backward(&cache, &up).unwrap();
        let obj = |x: &[f64]| -> f64 {
            let s = front.forward(x).unwrap();
            s.frames.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut num = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            num[i] = (obj(&xp) - obj(&xm)) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }
}
