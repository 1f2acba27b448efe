use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("invalid frame spec: {0}")]
    InvalidFrameSpec(String),

    #[error("inconsistent spectrogram: {0}")]
    InconsistentSpectrogram(String),

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("undefined reference loudness: reference signal is all zeros")]
    UndefinedReferenceLoudness,

    #[error("rt60 {0} s outside (0.05, 2.0]")]
    Rt60OutOfRange(f64),

    #[error("empty RIR bank")]
    EmptyBank,

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("schur iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("not safely diagonalizable (eigenvector condition number {0:.3e})")]
    NotDiagonalizable(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeChain { layer: String, detail: String },

    #[error("tensor shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("victim accuracy {accuracy:.4} below required {required:.2}")]
    UnderAccuracy { accuracy: f64, required: f64 },

    #[error("waveform shorter than one segment ({len} < {segment})")]
    TooShortForSegment { len: usize, segment: usize },

    #[error("transcript has {got} tokens but waveform has {segments} segments")]
    TargetLength { got: usize, segments: usize },

    #[error("vocabulary too small: {0}")]
    Vocabulary(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("undefined WER: empty reference")]
    UndefinedWer,

    #[error("reference has no active frames")]
    SilentReference,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}
