use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fft_inverse, read_wav, rfft_full, write_wav, Waveform};
use crate::error::{Error, Result};

/// Resolution of [`RirBank::power_profile`]: one-sided bins of a 512-point DFT.
pub const PROFILE_BINS: usize = 257;

/// -60 dB expressed as a natural-log amplitude decay, ln(10^3).
const DECAY_60DB: f64 = 6.91;

#[derive(Debug, Clone, PartialEq)]
pub struct RirFilter {
    pub impulse: Vec<f64>,
    pub rt60_s: f64,
    pub sample_rate_hz: u32,
}

impl RirFilter {
    /// Single unit tap: the identity filter.
    pub fn identity(sample_rate_hz: u32) -> Self {
        Self {
            impulse: vec![1.0],
            rt60_s: 0.0,
            sample_rate_hz,
        }
    }

    pub fn energy(&self) -> f64 {
        self.impulse.iter().map(|v| v * v).sum()
    }
}

/// Seeded exponentially decaying Gaussian noise impulse, normalised to unit energy.
pub fn simulate_rir(rt60_s: f64, seed: u64, sample_rate_hz: u32) -> Result<RirFilter> {
    if !(rt60_s > 0.05 && rt60_s <= 2.0) {
        return Err(Error::Rt60OutOfRange(rt60_s));
    }
    let fs = sample_rate_hz as f64;
    let len = (rt60_s * fs).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut impulse: Vec<f64> = (0..len)
        .map(|n| {
            let g: f64 = rng.sample(StandardNormal);
            g * (-DECAY_60DB * n as f64 / (rt60_s * fs)).exp()
        })
        .collect();
    let norm = impulse.iter().map(|v| v * v).sum::<f64>().sqrt();
    impulse.iter_mut().for_each(|v| *v /= norm);
    Ok(RirFilter {
        impulse,
        rt60_s,
        sample_rate_hz,
    })
}

/// Linear convolution of `w` with `h`, truncated to `len(w)`.
pub fn apply_rir(w: &Waveform, h: &RirFilter) -> Result<Waveform> {
    if w.sample_rate_hz != h.sample_rate_hz {
        return Err(Error::SampleRateMismatch(w.sample_rate_hz, h.sample_rate_hz));
    }
    let conv = Convolver::new(&h.impulse, w.len());
    Ok(Waveform::new(conv.apply(&w.samples), w.sample_rate_hz))
}

/// Adjoint of [`apply_rir`]: maps a gradient on the output back to the input.
pub fn apply_rir_transpose(upstream: &[f64], h: &RirFilter) -> Vec<f64> {
    Convolver::new(&h.impulse, upstream.len()).apply_transpose(upstream)
}

/// FFT convolution of a fixed kernel against signals of a fixed length.
#[derive(Debug, Clone)]
pub struct Convolver {
    signal_len: usize,
    kernel_len: usize,
    fft_len: usize,
    kernel_spectrum: Vec<Complex64>,
    reversed_spectrum: Vec<Complex64>,
}

impl Convolver {
    pub fn new(kernel: &[f64], signal_len: usize) -> Self {
        let fft_len = (signal_len + kernel.len()).next_power_of_two();
        let reversed: Vec<f64> = kernel.iter().rev().copied().collect();
        Self {
            signal_len,
            kernel_len: kernel.len(),
            fft_len,
            kernel_spectrum: rfft_full(kernel, fft_len),
            reversed_spectrum: rfft_full(&reversed, fft_len),
        }
    }

    fn convolve(&self, x: &[f64], spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = rfft_full(x, self.fft_len);
        for (b, k) in buf.iter_mut().zip(spectrum) {
            *b *= k;
        }
        fft_inverse(self.fft_len).process(&mut buf);
        buf.iter().map(|c| c.re / self.fft_len as f64).collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.signal_len);
        let mut y = self.convolve(x, &self.kernel_spectrum);
        y.truncate(self.signal_len);
        y
    }

    pub fn apply_transpose(&self, dy: &[f64]) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.signal_len);
        let full = self.convolve(dy, &self.reversed_spectrum);
        full[self.kernel_len - 1..self.kernel_len - 1 + self.signal_len].to_vec()
    }
}

/// A set of impulse responses plus their mean per-bin power response.
#[derive(Debug, Clone, PartialEq)]
pub struct RirBank {
    pub filters: Vec<RirFilter>,
    /// Mean |H(f)|^2 over the filters at [`PROFILE_BINS`] frequencies.
    pub power_profile: Vec<f64>,
}

impl RirBank {
    pub fn from_filters(filters: Vec<RirFilter>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::EmptyBank);
        }
        let power_profile = power_profile(&filters);
        Ok(Self {
            filters,
            power_profile,
        })
    }

    /// Bank with an explicit power profile (resampled to [`PROFILE_BINS`]).
    pub fn with_profile(filters: Vec<RirFilter>, profile: Vec<f64>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::EmptyBank);
        }
        if profile.is_empty() || profile.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Config("power profile must be strictly positive".into()));
        }
        Ok(Self {
            filters,
            power_profile: resample_profile(&profile, PROFILE_BINS),
        })
    }

    /// `n_filters` seeded impulses with RT60 spread evenly over `rt60_range`.
    pub fn simulate(
        n_filters: usize,
        rt60_range: (f64, f64),
        seed: u64,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        if n_filters == 0 {
            return Err(Error::EmptyBank);
        }
        let (lo, hi) = rt60_range;
        let filters = (0..n_filters)
            .map(|i| {
                let frac = if n_filters == 1 {
                    0.0
                } else {
                    i as f64 / (n_filters - 1) as f64
                };
                simulate_rir(lo + (hi - lo) * frac, seed.wrapping_add(i as u64 * 0x9E37), sample_rate_hz)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_filters(filters)
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Profile linearly interpolated onto `n_bins` evenly spaced frequencies.
    pub fn profile_at(&self, n_bins: usize) -> Vec<f64> {
        resample_profile(&self.power_profile, n_bins)
    }

    /// Writes `rir_XXX.wav` files and a `bank.txt` sidecar (`filename rt60`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut sidecar = String::new();
        for (i, f) in self.filters.iter().enumerate() {
            let name = format!("rir_{i:03}.wav");
            // impulses are stored peak-normalised to use the 16-bit range
            let peak = f.impulse.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let w = Waveform::new(f.impulse.iter().map(|v| v / peak).collect(), f.sample_rate_hz);
            write_wav(&dir.join(&name), &w)?;
            sidecar.push_str(&format!("{name} {}\n", f.rt60_s));
        }
        fs::write(dir.join("bank.txt"), sidecar)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar = fs::read_to_string(dir.join("bank.txt"))?;
        let mut filters = Vec::new();
        for (lineno, line) in sidecar.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (name, rt60) = match (parts.next(), parts.next(), parts.next()) {
                (Some(n), Some(r), None) => (n, r),
                _ => {
                    return Err(Error::Config(format!(
                        "bank.txt line {}: expected `filename rt60`",
                        lineno + 1
                    )))
                }
            };
            let rt60_s: f64 = rt60
                .parse()
                .map_err(|_| Error::Config(format!("bank.txt line {}: bad rt60", lineno + 1)))?;
            let w = read_wav(&dir.join(name))?;
            let norm = w.energy().sqrt();
            if norm == 0.0 {
                return Err(Error::Config(format!("impulse {name} is silent")));
            }
            filters.push(RirFilter {
                impulse: w.samples.iter().map(|v| v / norm).collect(),
                rt60_s,
                sample_rate_hz: w.sample_rate_hz,
            });
        }
        Self::from_filters(filters)
    }
}

fn power_profile(filters: &[RirFilter]) -> Vec<f64> {
    let base = 2 * (PROFILE_BINS - 1);
    let mut profile = vec![0.0; PROFILE_BINS];
    for f in filters {
        let m = f.impulse.len().max(base).next_power_of_two();
        let spectrum = rfft_full(&f.impulse, m);
        let ratio = m / base;
        // average |H|^2 over the fine bins nearest each coarse bin
        for (j, p) in profile.iter_mut().enumerate() {
            let centre = (j * ratio) as isize;
            let half = (ratio / 2) as isize;
            let lo = centre - half;
            let hi = centre - half + ratio as isize;
            let mut acc = 0.0;
            for i in lo..hi {
                acc += spectrum[i.rem_euclid(m as isize) as usize].norm_sqr();
            }
            *p += acc / ratio as f64;
        }
    }
    profile
        .iter()
        .map(|p| (p / filters.len() as f64).max(1e-12))
        .collect()
}

fn resample_profile(profile: &[f64], n_bins: usize) -> Vec<f64> {
    if profile.len() == n_bins {
        return profile.to_vec();
    }
    if profile.len() == 1 || n_bins == 1 {
        let mean = profile.iter().sum::<f64>() / profile.len() as f64;
        return vec![mean; n_bins];
    }
    (0..n_bins)
        .map(|j| {
            let pos = j as f64 * (profile.len() - 1) as f64 / (n_bins - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 >= profile.len() {
                profile[profile.len() - 1]
            } else {
                profile[i] * (1.0 - frac) + profile[i + 1] * frac
            }
        })
        .collect()
}
