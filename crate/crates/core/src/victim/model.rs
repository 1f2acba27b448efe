use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Transcript, Utterance, Vocabulary, SEGMENT_LEN};
use crate::error::{Error, Result};
use crate::nn::{build_mlp, checkpoint, AdamConfig, AdamState, MlpSpec, Network};
use crate::signal::{MfccCache, MfccConfig, MfccFrontEnd, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of utterances held out for the accuracy check.
    pub holdout: f64,
    pub target_accuracy: f64,
    pub seed: u64,
    pub mfcc: MfccConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            epochs: 300,
            lr: 1e-2,
            holdout: 0.2,
            target_accuracy: 0.95,
            seed: 0,
            mfcc: MfccConfig::default(),
        }
    }
}

/// Frame-averaged, standardised MFCCs of each 0.25 s segment fed to a small
/// classifier.
#[derive(Debug, Clone)]
pub struct VictimModel {
    pub vocab: Vocabulary,
    pub front_end: MfccFrontEnd,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub net: Network,
    pub heldout_accuracy: f64,
}

fn segment_features(front: &MfccFrontEnd, seg: &[f64]) -> Result<(Vec<f64>, MfccCache)> {
    let (m, cache) = front.forward_cached(seg)?;
    let mut f = vec![0.0; m.n_coeffs];
    for t in 0..m.n_frames {
        for (a, v) in f.iter_mut().zip(m.frame(t)) {
            *a += v;
        }
    }
    for a in f.iter_mut() {
        *a /= m.n_frames as f64;
    }
    Ok((f, cache))
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl VictimModel {
    pub fn n_segments(&self, len: usize) -> usize {
        len / SEGMENT_LEN
    }

    fn segments<'a>(&self, w: &'a Waveform) -> Result<Vec<&'a [f64]>> {
        let n = self.n_segments(w.len());
        if n == 0 {
            return Err(Error::TooShortForSegment {
                len: w.len(),
                segment: SEGMENT_LEN,
            });
        }
        Ok((0..n).map(|s| &w.samples[s * SEGMENT_LEN..(s + 1) * SEGMENT_LEN]).collect())
    }

    fn standardise(&self, f: &mut [f64]) {
        for ((v, m), s) in f.iter_mut().zip(&self.feature_mean).zip(&self.feature_std) {
            *v = (*v - m) / s;
        }
    }

    /// Log-probabilities per segment.
    pub fn log_probs(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        let segs = self.segments(w)?;
        let mut x = Vec::new();
        for s in &segs {
            let (mut f, _) = segment_features(&self.front_end, s)?;
            self.standardise(&mut f);
            x.extend(f);
        }
        let t = self.net.trace(&x, segs.len())?;
        Ok(t.output().chunks(self.vocab.len()).map(log_softmax).collect())
    }

    /// Cross-entropy of every segment toward `target`.
    pub fn segment_losses(&self, w: &Waveform, target: &Transcript) -> Result<Vec<f64>> {
        let lp = self.log_probs(w)?;
        check_target(target, lp.len(), self.vocab.len())?;
        Ok(lp.iter().zip(&target.0).map(|(l, t)| -l[*t]).collect())
    }
}

fn check_target(target: &Transcript, segments: usize, k: usize) -> Result<()> {
    if target.len() != segments {
        return Err(Error::TargetLength {
            got: target.len(),
            segments,
        });
    }
    if let Some(t) = target.0.iter().find(|t| **t >= k) {
        return Err(Error::Vocabulary(format!("token {t} outside a {k}-keyword vocabulary")));
    }
    Ok(())
}

/// Per-segment argmax labels.
pub fn transcribe(model: &VictimModel, w: &Waveform) -> Result<Transcript> {
    Ok(Transcript(model.log_probs(w)?.iter().map(|l| argmax(l)).collect()))
}

/// Summed per-segment cross-entropy toward `target` and its gradient with
/// respect to every sample (zero past the last whole segment).
pub fn victim_loss_and_grad(model: &VictimModel, w: &Waveform, target: &Transcript) -> Result<(f64, Waveform)> {
    let (loss, grad, _) = loss_grad_transcript(model, w, target)?;
    Ok((loss, grad))
}

/// [`victim_loss_and_grad`] plus the transcript of `w` from the same pass.
pub fn loss_grad_transcript(model: &VictimModel, w: &Waveform, target: &Transcript) -> Result<(f64, Waveform, Transcript)> {
    let segs = model.segments(w)?;
    let k = model.vocab.len();
    check_target(target, segs.len(), k)?;
    let mut x = Vec::new();
    let mut caches = Vec::with_capacity(segs.len());
    for s in &segs {
        let (mut f, c) = segment_features(&model.front_end, s)?;
        model.standardise(&mut f);
        x.extend(f);
        caches.push(c);
    }
    let n = segs.len();
    let t = model.net.trace(&x, n)?;
    let mut loss = 0.0;
    let mut up = vec![0.0; n * k];
    let mut labels = Vec::with_capacity(n);
    for (s, z) in t.output().chunks(k).enumerate() {
        labels.push(argmax(z));
        let lp = log_softmax(z);
        let tgt = target.0[s];
        loss -= lp[tgt];
        for j in 0..k {
            up[s * k + j] = lp[j].exp() - if j == tgt { 1.0 } else { 0.0 };
        }
    }
    let g = model.net.backprop(&t, &up)?;
    let nc = model.front_end.config.n_coeffs;
    let n_frames = model.front_end.n_frames(SEGMENT_LEN);
    let mut grad = vec![0.0; w.len()];
    for (s, cache) in caches.iter().enumerate() {
        let mut dm = vec![0.0; n_frames * nc];
        for c in 0..nc {
            let v = g.input[s * nc + c] / model.feature_std[c] / n_frames as f64;
            for f in 0..n_frames {
                dm[f * nc + c] = v;
            }
        }
        let gs = model.front_end.backward(cache, &dm)?;
        grad[s * SEGMENT_LEN..(s + 1) * SEGMENT_LEN].copy_from_slice(&gs);
    }
    Ok((loss, Waveform::new(grad, w.sample_rate_hz), Transcript(labels)))
}

/// Full-batch Adam on segment cross-entropy; fails unless the held-out
/// segment accuracy reaches `config.target_accuracy`.
pub fn train_victim(corpus: &[Utterance], vocab: &Vocabulary, config: &VictimConfig) -> Result<VictimModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let front = MfccFrontEnd::new(config.mfcc)?;
    let k = vocab.len();
    let nc = config.mfcc.n_coeffs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((corpus.len() as f64 * config.holdout).ceil() as usize).min(corpus.len() - 1);
    let (hold, fit) = if n_hold == 0 {
        (order.clone(), order)
    } else {
        let (h, f) = order.split_at(n_hold);
        (h.to_vec(), f.to_vec())
    };

    let collect = |idx: &[usize]| -> Result<(Vec<f64>, Vec<usize>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in idx {
            let u = &corpus[i];
            let n = u.waveform.len() / SEGMENT_LEN;
            if n != u.transcript.len() {
                return Err(Error::TargetLength {
                    got: u.transcript.len(),
                    segments: n,
                });
            }
            for s in 0..n {
                let (f, _) = segment_features(&front, &u.waveform.samples[s * SEGMENT_LEN..(s + 1) * SEGMENT_LEN])?;
                x.extend(f);
                y.push(u.transcript.0[s]);
            }
        }
        Ok((x, y))
    };
    let (mut xf, yf) = collect(&fit)?;
    let (mut xh, yh) = collect(&hold)?;
    if yf.is_empty() || yh.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(t) = yf.iter().chain(&yh).find(|t| **t >= k) {
        return Err(Error::Vocabulary(format!("token {t} outside a {k}-keyword vocabulary")));
    }

    let nf = yf.len();
    let mut mean = vec![0.0; nc];
    let mut std = vec![0.0; nc];
    for r in xf.chunks(nc) {
        for c in 0..nc {
            mean[c] += r[c] / nf as f64;
        }
    }
    for r in xf.chunks(nc) {
        for c in 0..nc {
            std[c] += (r[c] - mean[c]).powi(2) / nf as f64;
        }
    }
    for s in std.iter_mut() {
        *s = s.sqrt().max(1e-6);
    }
    for x in [&mut xf, &mut xh] {
        for r in x.chunks_mut(nc) {
            for c in 0..nc {
                r[c] = (r[c] - mean[c]) / std[c];
            }
        }
    }

    let mut net = build_mlp(
        &MlpSpec {
            input_dim: nc,
            hidden: config.hidden.clone(),
            output_dim: k,
            weight_norm: false,
            logit_head: false,
        },
        config.seed,
    )?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut state = AdamState::new(net.n_params());
    for _ in 0..config.epochs {
        let t = net.trace(&xf, nf)?;
        let mut up = vec![0.0; nf * k];
        for (s, z) in t.output().chunks(k).enumerate() {
            let lp = log_softmax(z);
            for j in 0..k {
                up[s * k + j] = (lp[j].exp() - if j == yf[s] { 1.0 } else { 0.0 }) / nf as f64;
            }
        }
        let g = net.backprop(&t, &up)?;
        net.adam_update(&g.params, &mut state, &adam)?;
    }
    let t = net.trace(&xh, yh.len())?;
    let correct = t.output().chunks(k).zip(&yh).filter(|(z, y)| argmax(z) == **y).count();
    let accuracy = correct as f64 / yh.len() as f64;
    if accuracy < config.target_accuracy {
        return Err(Error::UnderAccuracy {
            accuracy,
            required: config.target_accuracy,
        });
    }
    Ok(VictimModel {
        vocab: vocab.clone(),
        front_end: front,
        feature_mean: mean,
        feature_std: std,
        net,
        heldout_accuracy: accuracy,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VictimMeta {
    vocab: Vocabulary,
    mfcc: MfccConfig,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    heldout_accuracy: f64,
}

/// Writes `victim_meta.json` (front end, standardisation, vocabulary) and
/// `victim.ckpt` (plus its descriptor) into `dir`.
pub fn save_victim(dir: &Path, model: &VictimModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = VictimMeta {
        vocab: model.vocab.clone(),
        mfcc: model.front_end.config,
        feature_mean: model.feature_mean.clone(),
        feature_std: model.feature_std.clone(),
        heldout_accuracy: model.heldout_accuracy,
    };
    std::fs::write(dir.join("victim_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    checkpoint::save(&dir.join("victim.ckpt"), &model.net, None)
}

pub fn load_victim(dir: &Path) -> Result<VictimModel> {
    let meta: VictimMeta = serde_json::from_slice(&std::fs::read(dir.join("victim_meta.json"))?)?;
    let (net, _) = checkpoint::load(&dir.join("victim.ckpt"))?;
    Ok(VictimModel {
        vocab: meta.vocab,
        front_end: MfccFrontEnd::new(meta.mfcc)?,
        feature_mean: meta.feature_mean,
        feature_std: meta.feature_std,
        net,
        heldout_accuracy: meta.heldout_accuracy,
    })
}
