use std::path::Path;

use super::{Waveform, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

/// Reads a 16-bit PCM mono WAV at 16 kHz. Anything else is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {}-bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} Hz, expected {} Hz",
            path.display(),
            spec.sample_rate,
            SAMPLE_RATE_HZ
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if w.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedFormat(format!(
            "refusing to write {} Hz audio",
            w.sample_rate_hz
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}
