use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Loudness reported for an all-zero perturbation.
pub const SILENT_DB: f64 = f64::NEG_INFINITY;

/// Mono sample sequence with its sample rate. Samples are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.samples.iter().map(|s| s * c).collect(), self.sample_rate_hz)
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.is_finite())
    }

    /// Sample-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        self.check_compatible(other)?;
        Ok(Self::new(
            self.samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            self.sample_rate_hz,
        ))
    }

    pub fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate_hz != other.sample_rate_hz {
            return Err(Error::SampleRateMismatch(
                self.sample_rate_hz,
                other.sample_rate_hz,
            ));
        }
        if self.len() != other.len() {
            return Err(Error::LengthMismatch(self.len(), other.len()));
        }
        Ok(())
    }

    pub fn concat(parts: &[Waveform]) -> Result<Waveform> {
        let rate = parts.first().map(|p| p.sample_rate_hz).unwrap_or(SAMPLE_RATE_HZ);
        let mut samples = Vec::new();
        for p in parts {
            if p.sample_rate_hz != rate {
                return Err(Error::SampleRateMismatch(rate, p.sample_rate_hz));
            }
            samples.extend_from_slice(&p.samples);
        }
        Ok(Self::new(samples, rate))
    }
}

/// Peak-ratio loudness of `delta` relative to `x_org`:
/// `20 log10(max|delta|) - 20 log10(max|x_org|)`.
///
/// Returns [`SILENT_DB`] when `delta` is identically zero.
pub fn loudness_db(delta: &Waveform, x_org: &Waveform) -> Result<f64> {
    if delta.len() != x_org.len() {
        return Err(Error::LengthMismatch(delta.len(), x_org.len()));
    }
    let reference = x_org.peak();
    if reference == 0.0 {
        return Err(Error::UndefinedReferenceLoudness);
    }
    let peak = delta.peak();
    if peak == 0.0 {
        return Ok(SILENT_DB);
    }
    Ok(20.0 * peak.log10() - 20.0 * reference.log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn carrier() -> Waveform {
        Waveform::new(
            (0..256).map(|i| (i as f64 * 0.1).sin() * 0.7).collect(),
            SAMPLE_RATE_HZ,
        )
    }

    #[test]
    fn loudness_of_tenth_is_minus_twenty() {
        let x = carrier();
        let d = x.scaled(0.1);
        assert!((loudness_db(&d, &x).unwrap() + 20.0).abs() < 1e-12);
    }

    #[test]
    fn loudness_of_equal_peaks_is_zero() {
        let x = carrier();
        assert!(loudness_db(&x, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn loudness_of_silence_is_sentinel() {
        let x = carrier();
        let d = Waveform::zeros(x.len(), SAMPLE_RATE_HZ);
        assert_eq!(loudness_db(&d, &x).unwrap(), SILENT_DB);
    }

    #[test]
    fn loudness_rejects_zero_reference() {
        let z = Waveform::zeros(16, SAMPLE_RATE_HZ);
        assert!(matches!(
            loudness_db(&z, &z),
            Err(Error::UndefinedReferenceLoudness)
        ));
    }

    #[test]
    fn loudness_scales_additively_in_db() {
        let x = carrier();
        let d = Waveform::new(
            (0..256).map(|i| ((i * 7) % 13) as f64 / 50.0 - 0.1).collect(),
            SAMPLE_RATE_HZ,
        );
        let base = loudness_db(&d, &x).unwrap();
        for c in [0.01, 0.5, 3.0, 170.0] {
            let got = loudness_db(&d.scaled(c), &x).unwrap();
            assert!((got - base - 20.0 * c.log10()).abs() < 1e-9);
        }
    }
}
