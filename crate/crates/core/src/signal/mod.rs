//! DSP kernels: framing, STFT and its inverse, MFCC front-end, room impulse
//! responses and the peak-ratio loudness metric.

mod io;
mod mfcc;
mod rir;
mod stft;
mod waveform;

pub use io::{read_wav, write_wav};
pub use mfcc::{dct_ii_ortho, mfcc, MelFilterbank, MfccCache, MfccConfig, MfccFrontEnd, MfccSequence};
pub use rir::{apply_rir, apply_rir_transpose, simulate_rir, Convolver, RirBank, RirFilter, PROFILE_BINS};
pub use stft::{istft, stft, FrameSpec, Spectrogram, Window};
pub use waveform::{loudness_db, Waveform, SAMPLE_RATE_HZ, SILENT_DB};

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_forward(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

pub(crate) fn fft_inverse(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Real-input FFT returning all `len` complex bins.
pub(crate) fn rfft_full(x: &[f64], len: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft_forward(len).process(&mut buf);
    buf
}
