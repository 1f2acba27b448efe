//! Latent-projection defense: fit generator latents to the log-mel patches of
//! an input, then resynthesise the input with the fitted band energies.

use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::Dataset;
use crate::metrics::{seg_snr, stoi};
use crate::nn::{adam_step, AdamConfig, AdamState, Network, Tensor};
use crate::signal::{dct_ii_ortho, istft, stft, MfccFrontEnd, Waveform};
use crate::victim::{transcribe, Transcript, Utterance, VictimModel, Vocabulary};

/// Frames per generator patch.
pub const PATCH_FRAMES: usize = 4;
/// Largest per-band power change applied during resynthesis, in nepers of
/// power (about 43 dB).
const MAX_LOG_GAIN: f64 = 10.0;
const RANGE_MARGIN: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSpace {
    /// DCT of the log-mel patch, first `n_coeffs` per frame.
    Mfcc,
    /// The log-mel patch itself.
    Spectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub n_restarts: usize,
    pub steps_per_restart: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub space: DistanceSpace,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            n_restarts: 4,
            steps_per_restart: 300,
            lr: 0.05,
            latent_dim: 64,
            space: DistanceSpace::Mfcc,
            seed: 0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_restarts == 0 || self.steps_per_restart == 0 {
            return Err(Error::Config("projection needs at least one restart and one step".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("projection lr {}", self.lr)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Per-band affine map between log-mel energies and the generator's (-1, 1)
/// output range, plus the cepstral truncation used by the mfcc distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCodec {
    pub frames: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

impl PatchCodec {
    /// Fits the band ranges to every log-mel frame of `corpus`.
    pub fn fit(front: &MfccFrontEnd, corpus: &[Utterance]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let m = front.config.n_mels;
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for u in corpus {
            let lm = front.log_mel(&u.waveform.samples)?;
            for row in lm.chunks_exact(m) {
                for (b, v) in row.iter().enumerate() {
                    lo[b] = lo[b].min(*v);
                    hi[b] = hi[b].max(*v);
                }
            }
        }
        let center = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half_range = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (0.5 * (b - a) * RANGE_MARGIN).max(1e-6))
            .collect();
        Ok(Self {
            frames: PATCH_FRAMES,
            n_mels: m,
            n_coeffs: front.config.n_coeffs,
            center,
            half_range,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.frames * self.n_mels
    }

    pub fn item_shape(&self) -> Vec<usize> {
        vec![1, self.frames, self.n_mels]
    }

    /// Log-mel rows (`n_mels` per frame) to generator units.
    pub fn encode(&self, log_mel: &[f64]) -> Vec<f64> {
        log_mel
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let b = i % self.n_mels;
                (v - self.center[b]) / self.half_range[b]
            })
            .collect()
    }

    pub fn decode(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let b = i % self.n_mels;
                self.center[b] + self.half_range[b] * x
            })
            .collect()
    }

    /// First frame of each patch: back to back, with the last one moved
    /// flush with the end when `n_frames` is not a multiple of the patch.
    pub fn patch_starts(&self, n_frames: usize) -> Result<Vec<usize>> {
        if n_frames < self.frames {
            return Err(Error::SignalTooShort {
                len: n_frames,
                needed: self.frames,
            });
        }
        let mut starts: Vec<usize> = (0..n_frames / self.frames).map(|p| p * self.frames).collect();
        if n_frames % self.frames != 0 {
            starts.push(n_frames - self.frames);
        }
        Ok(starts)
    }

    /// Every window of `frames` log-mel frames, `hop` frames apart, from
    /// every utterance, in generator units.
    pub fn dataset(&self, front: &MfccFrontEnd, corpus: &[Utterance], hop: usize) -> Result<Dataset> {
        if hop == 0 {
            return Err(Error::Config("patch hop must be positive".into()));
        }
        let mut values = Vec::new();
        for u in corpus {
            let lm = self.encode(&front.log_mel(&u.waveform.samples)?);
            let n_frames = lm.len() / self.n_mels;
            let mut s = 0;
            while s + self.frames <= n_frames {
                values.extend_from_slice(&lm[s * self.n_mels..(s + self.frames) * self.n_mels]);
                s += hop;
            }
        }
        Dataset::table(self.item_shape(), values)
    }

    /// Representation of flat patches in the chosen distance space.
    pub fn repr(&self, patches: &[f64], space: DistanceSpace) -> Vec<f64> {
        let lm = self.decode(patches);
        match space {
            DistanceSpace::Spectrogram => lm,
            DistanceSpace::Mfcc => lm
                .chunks_exact(self.n_mels)
                .flat_map(|row| dct_ii_ortho(row, self.n_coeffs))
                .collect(),
        }
    }

    /// Transpose of the Jacobian of [`repr`](Self::repr) applied to `g`.
    fn repr_transpose(&self, g: &[f64], space: DistanceSpace) -> Vec<f64> {
        let in_lm: Vec<f64> = match space {
            DistanceSpace::Spectrogram => g.to_vec(),
            DistanceSpace::Mfcc => {
                let n = self.n_mels as f64;
                g.chunks_exact(self.n_coeffs)
                    .flat_map(|gc| {
                        (0..self.n_mels).map(move |m| {
                            gc.iter()
                                .enumerate()
                                .map(|(k, v)| {
                                    let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                                    let ang = std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n;
                                    v * s * ang.cos()
                                })
                                .sum::<f64>()
                        })
                    })
                    .collect()
            }
        };
        in_lm
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.half_range[i % self.n_mels])
            .collect()
    }

    fn repr_len(&self, space: DistanceSpace) -> usize {
        match space {
            DistanceSpace::Spectrogram => self.patch_size(),
            DistanceSpace::Mfcc => self.frames * self.n_coeffs,
        }
    }
}

/// Per-patch squared distances between `repr(G(z))` and `target_repr`, and
/// the gradient of their sum with respect to the flat latents `z`.
pub fn projection_loss_grad(
    generator: &Network,
    codec: &PatchCodec,
    space: DistanceSpace,
    z: &[f64],
    target_repr: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dz = generator.input_size();
    let rl = codec.repr_len(space);
    if dz == 0 || z.len() % dz != 0 {
        return Err(Error::LengthMismatch(z.len(), dz));
    }
    let batch = z.len() / dz;
    if target_repr.len() != batch * rl {
        return Err(Error::LengthMismatch(target_repr.len(), batch * rl));
    }
    let trace = generator.trace(z, batch)?;
    let diff: Vec<f64> = codec
        .repr(trace.output(), space)
        .iter()
        .zip(target_repr)
        .map(|(a, b)| a - b)
        .collect();
    let losses = diff.chunks_exact(rl).map(|d| d.iter().map(|v| v * v).sum()).collect();
    let g_repr: Vec<f64> = diff.iter().map(|v| 2.0 * v).collect();
    let g = generator.backprop(&trace, &codec.repr_transpose(&g_repr, space))?;
    Ok((losses, g.input))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `n_patches x latent_dim`.
    pub z_star: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl Projection {
    pub fn residual(&self) -> f64 {
        self.residuals.iter().sum()
    }
}

fn check_generator(generator: &Network, codec: &PatchCodec, cfg: &ProjectionConfig) -> Result<()> {
    if generator.input_size() != cfg.latent_dim {
        return Err(Error::Shape {
            expected: vec![cfg.latent_dim],
            got: generator.input_shape().to_vec(),
        });
    }
    if generator.output_size() != codec.patch_size() {
        return Err(Error::Shape {
            expected: codec.item_shape(),
            got: generator.output_shape().to_vec(),
        });
    }
    Ok(())
}

/// Adam-fits one latent per target patch from `n_restarts` seeded normal
/// starts and keeps, per patch, the best iterate seen. Patches are optimised
/// jointly but independently.
pub fn project_latent(generator: &Network, codec: &PatchCodec, target: &Tensor, cfg: &ProjectionConfig) -> Result<Projection> {
    cfg.validate()?;
    check_generator(generator, codec, cfg)?;
    let ps = codec.patch_size();
    if target.values.is_empty() || target.values.len() % ps != 0 {
        return Err(Error::LengthMismatch(target.values.len(), ps));
    }
    let n = target.values.len() / ps;
    let dz = cfg.latent_dim;
    let target_repr = codec.repr(&target.values, cfg.space);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_z = vec![0.0; n * dz];
    let mut best = vec![f64::INFINITY; n];
    let keep = |z: &[f64], losses: &[f64], best: &mut [f64], best_z: &mut [f64]| {
        for p in 0..n {
            if losses[p] < best[p] {
                best[p] = losses[p];
                best_z[p * dz..(p + 1) * dz].copy_from_slice(&z[p * dz..(p + 1) * dz]);
            }
        }
    };
    for _ in 0..cfg.n_restarts {
        let mut z: Vec<f64> = (0..n * dz).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut state = AdamState::new(z.len());
        for _ in 0..cfg.steps_per_restart {
            let (losses, grad) = projection_loss_grad(generator, codec, cfg.space, &z, &target_repr)?;
            keep(&z, &losses, &mut best, &mut best_z);
            adam_step(&mut z, &grad, &mut state, &adam)?;
        }
        let (losses, _) = projection_loss_grad(generator, codec, cfg.space, &z, &target_repr)?;
        keep(&z, &losses, &mut best, &mut best_z);
    }
    if best.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.steps_per_restart,
        });
    }
    Ok(Projection {
        z_star: best_z,
        residuals: best,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseResult {
    pub x_syn: Waveform,
    /// Sum of the per-patch squared distances.
    pub residual: f64,
    /// `n_patches x latent_dim`.
    pub z_star: Vec<f64>,
    pub transcript_in: Transcript,
    pub transcript_out: Transcript,
}

/// Target patches of `x` in generator units, with their first frames.
pub fn input_patches(front: &MfccFrontEnd, codec: &PatchCodec, x: &Waveform) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
    let lm = front.log_mel(&x.samples)?;
    let n_frames = lm.len() / codec.n_mels;
    let starts = codec.patch_starts(n_frames)?;
    let enc = codec.encode(&lm);
    let mut values = Vec::with_capacity(starts.len() * codec.patch_size());
    for &s in &starts {
        values.extend_from_slice(&enc[s * codec.n_mels..(s + codec.frames) * codec.n_mels]);
    }
    let t = Tensor::new(vec![starts.len(), 1, codec.frames, codec.n_mels], values)?;
    Ok((t, starts, lm))
}

/// Scales each STFT bin of `x` by the square root of the mel-interpolated
/// power ratio between the generated and the input log-mel energies, keeping
/// the input phase. Samples outside the analysed frames are left untouched.
fn resynthesize(front: &MfccFrontEnd, x: &Waveform, log_gain: &[f64]) -> Result<Waveform> {
    let fb = front.filterbank();
    let (n_mels, n_bins) = (fb.n_mels, fb.n_bins);
    let mut spec = stft(x, front.config.spec)?;
    let cover: Vec<f64> = (0..n_bins).map(|k| (0..n_mels).map(|m| fb.weights[m * n_bins + k]).sum()).collect();
    for t in 0..spec.n_frames {
        let g = &log_gain[t * n_mels..(t + 1) * n_mels];
        let frame = spec.frame_mut(t);
        for (k, c) in frame.iter_mut().enumerate() {
            let amp = if cover[k] > 0.0 {
                let p: f64 = (0..n_mels).map(|m| fb.weights[m * n_bins + k] * g[m].exp()).sum::<f64>() / cover[k];
                p.sqrt()
            } else {
                1.0
            };
            *c *= Complex64::new(amp - 1.0, 0.0);
        }
    }
    let change = istft(&spec)?;
    x.add(&change)
}

/// Projects `x_in` onto the generator's range, resynthesises it and
/// transcribes input and output.
pub fn defend(generator: &Network, victim: &VictimModel, codec: &PatchCodec, x_in: &Waveform, cfg: &ProjectionConfig) -> Result<DefenseResult> {
    let front = &victim.front_end;
    let needed = front.config.spec.frame_len + (codec.frames - 1) * front.config.spec.hop_len;
    if x_in.len() < needed {
        return Err(Error::SignalTooShort {
            len: x_in.len(),
            needed,
        });
    }
    let (target, starts, lm_in) = input_patches(front, codec, x_in)?;
    let proj = project_latent(generator, codec, &target, cfg)?;
    let out = generator.predict(&Tensor::new(vec![starts.len(), cfg.latent_dim], proj.z_star.clone())?)?;
    let gen_lm = codec.decode(&out.values);
    let n_mels = codec.n_mels;
    let n_frames = lm_in.len() / n_mels;
    let mut acc = vec![0.0; lm_in.len()];
    let mut hits = vec![0usize; n_frames];
    for (p, &s) in starts.iter().enumerate() {
        for f in 0..codec.frames {
            hits[s + f] += 1;
            for m in 0..n_mels {
                acc[(s + f) * n_mels + m] += gen_lm[(p * codec.frames + f) * n_mels + m];
            }
        }
    }
    let log_gain: Vec<f64> = acc
        .iter()
        .zip(&lm_in)
        .enumerate()
        .map(|(i, (a, l))| (a / hits[i / n_mels] as f64 - l).clamp(-MAX_LOG_GAIN, MAX_LOG_GAIN))
        .collect();
    let x_syn = resynthesize(front, x_in, &log_gain)?;
    if !x_syn.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    Ok(DefenseResult {
        transcript_in: transcribe(victim, x_in)?,
        transcript_out: transcribe(victim, &x_syn)?,
        x_syn,
        residual: proj.residual(),
        z_star: proj.z_star,
    })
}

/// One JSON document per defended input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub input: String,
    pub output: String,
    pub residual: f64,
    pub transcript_in: String,
    pub transcript_out: String,
    pub ground_truth: Option<String>,
    /// Quality of the synthesised signal against the input; absent when the
    /// input is too short or silent for the metric.
    pub seg_snr_db: Option<f64>,
    pub stoi: Option<f64>,
}

impl DefenseReport {
    pub fn new(input: &str, output: &str, x_in: &Waveform, r: &DefenseResult, vocab: &Vocabulary, truth: Option<&Transcript>) -> Self {
        Self {
            input: input.to_string(),
            output: output.to_string(),
            residual: r.residual,
            transcript_in: vocab.render(&r.transcript_in),
            transcript_out: vocab.render(&r.transcript_out),
            ground_truth: truth.map(|t| vocab.render(t)),
            seg_snr_db: seg_snr(x_in, &r.x_syn, 256).ok(),
            stoi: stoi(x_in, &r.x_syn).ok(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
