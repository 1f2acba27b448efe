//! Targeted white-box attacks on the toy transcriber: the norm-plus-loss
//! formulation optimised by Adam under an l∞ loudness box, and its
//! expectation-over-transformation variant with sampled RIRs and noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::signal::{apply_rir, loudness_db, write_wav, Convolver, RirBank, RirFilter, Waveform};
use crate::victim::{loss_grad_transcript, transcribe, Transcript, VictimModel, Vocabulary};

/// `n_targets` seeded phrases per ground truth, each differing from it in at
/// least one token, with lengths within `±length_jitter` tokens (at least 1).
pub fn assign_targets(
    truths: &[Transcript],
    vocab_size: usize,
    n_targets: usize,
    length_jitter: usize,
    seed: u64,
) -> Result<Vec<Vec<Transcript>>> {
    if vocab_size < 2 {
        return Err(Error::Vocabulary("targets need at least two keywords".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truths
        .iter()
        .map(|truth| {
            (0..n_targets)
                .map(|_| {
                    let lo = truth.len().saturating_sub(length_jitter).max(1);
                    let hi = (truth.len() + length_jitter).max(lo);
                    let n = rng.gen_range(lo..=hi);
                    let mut t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab_size)).collect();
                    if t == truth.0 {
                        // shift one token to a different keyword
                        let i = rng.gen_range(0..n);
                        t[i] = (t[i] + rng.gen_range(1..vocab_size)) % vocab_size;
                    }
                    Ok(Transcript(t))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub eps_db: f64,
    /// Loss weights tried in order until a feasible success is found.
    pub c_schedule: Vec<f64>,
    /// Total Adam steps over the whole schedule.
    pub max_iters: usize,
    pub lr: f64,
    /// Steps kept after the first success within a stage to shrink δ.
    pub refine_iters: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps_db: -15.0,
            c_schedule: vec![0.1, 1.0, 10.0, 100.0],
            max_iters: 3000,
            lr: 2e-3,
            refine_iters: 200,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        if self.c_schedule.is_empty() || self.c_schedule.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("c schedule must be non-empty and positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("attack learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EotConfig {
    /// Transformation set τ.
    pub bank: RirBank,
    pub noise_sigma: f64,
    /// Weight of ‖δ‖ in the EOT objective.
    pub alpha_k: f64,
    /// Monte-Carlo draws per step.
    pub n_mc: usize,
    /// Filter outside the bank used to judge success.
    pub holdout: RirFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub x_adv: Waveform,
    pub delta: Waveform,
    pub target: Transcript,
    pub success: bool,
    pub l_db: f64,
    pub iters_used: usize,
}

/// One sampled transformation: a bank filter and a noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EotDraw {
    pub filter: usize,
    pub noise_seed: u64,
}

pub fn draw_transforms(eot: &EotConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<EotDraw> {
    (0..n)
        .map(|_| EotDraw {
            filter: rng.gen_range(0..eot.bank.len()),
            noise_seed: rng.gen(),
        })
        .collect()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn add_norm_grad(grad: &mut [f64], delta: &[f64], weight: f64) {
    let n = l2(delta);
    if n > 0.0 {
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += weight * d / n;
        }
    }
}

fn adv(x: &Waveform, delta: &[f64]) -> Waveform {
    Waveform::new(x.samples.iter().zip(delta).map(|(a, b)| a + b).collect(), x.sample_rate_hz)
}

/// Objective `‖δ‖ + c·𝓛(x + δ, target)` and its gradient in δ, with the
/// transcript of `x + δ`.
pub fn cw_gradient(
    victim: &VictimModel,
    x: &Waveform,
    delta: &[f64],
    target: &Transcript,
    c: f64,
) -> Result<(f64, Vec<f64>, Transcript)> {
    let (loss, g, t) = loss_grad_transcript(victim, &adv(x, delta), target)?;
    let mut grad: Vec<f64> = g.samples.iter().map(|v| c * v).collect();
    add_norm_grad(&mut grad, delta, 1.0);
    Ok((l2(delta) + c * loss, grad, t))
}

/// Cached convolvers for one signal length.
pub struct EotKernels {
    convolvers: Vec<Convolver>,
}

impl EotKernels {
    pub fn new(eot: &EotConfig, signal_len: usize) -> Result<Self> {
        if eot.bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        Ok(Self {
            convolvers: eot.bank.filters.iter().map(|f| Convolver::new(&f.impulse, signal_len)).collect(),
        })
    }
}

/// Mean over `draws` of `c·𝓛(h ∗ (x + δ) + ω, target)` plus `α_k‖δ‖`, its
/// gradient in δ, and whether every draw transcribed to the target.
#[allow(clippy::too_many_arguments)]
pub fn eot_gradient(
    victim: &VictimModel,
    x: &Waveform,
    delta: &[f64],
    target: &Transcript,
    c: f64,
    eot: &EotConfig,
    kernels: &EotKernels,
    draws: &[EotDraw],
) -> Result<(f64, Vec<f64>, bool)> {
    if draws.is_empty() {
        return Err(Error::Config("EOT needs at least one draw".into()));
    }
    let xa = adv(x, delta);
    let n = xa.len();
    let mut grad = vec![0.0; n];
    let mut loss = 0.0;
    let mut all_hit = true;
    for d in draws {
        let conv = kernels
            .convolvers
            .get(d.filter)
            .ok_or_else(|| Error::Config(format!("filter {} outside the bank", d.filter)))?;
        let mut y = conv.apply(&xa.samples);
        if eot.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, eot.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(d.noise_seed);
            for v in y.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let (l, g, t) = loss_grad_transcript(victim, &Waveform::new(y, x.sample_rate_hz), target)?;
        all_hit &= t == *target;
        loss += l;
        for (a, b) in grad.iter_mut().zip(conv.apply_transpose(&g.samples)) {
            *a += b;
        }
    }
    let m = draws.len() as f64;
    for g in grad.iter_mut() {
        *g *= c / m;
    }
    add_norm_grad(&mut grad, delta, eot.alpha_k);
    Ok((eot.alpha_k * l2(delta) + c * loss / m, grad, all_hit))
}

/// Largest admissible |δ| sample: strictly below `eps_db` relative to the
/// peak of `x`.
fn box_bound(x: &Waveform, eps_db: f64) -> f64 {
    x.peak() * 10f64.powf(eps_db / 20.0) * (1.0 - 1e-9)
}

fn project(x: &Waveform, delta: &mut [f64], bound: f64) {
    for (d, xv) in delta.iter_mut().zip(&x.samples) {
        *d = d.clamp(-bound, bound);
        // keep x + δ inside [-1, 1]
        *d = (xv + *d).clamp(-1.0, 1.0) - xv;
    }
}

fn finish(x: &Waveform, delta: Vec<f64>, target: &Transcript, success: bool, iters: usize) -> Result<AdversarialExample> {
    let d = Waveform::new(delta, x.sample_rate_hz);
    let l_db = loudness_db(&d, x)?;
    Ok(AdversarialExample {
        x_adv: adv(x, &d.samples),
        delta: d,
        target: target.clone(),
        success,
        l_db,
        iters_used: iters,
    })
}

enum Mode<'a> {
    Cw,
    Eot(&'a EotConfig, EotKernels, ChaCha8Rng),
}

fn run(victim: &VictimModel, x: &Waveform, target: &Transcript, cfg: &AttackConfig, mut mode: Mode) -> Result<AdversarialExample> {
    cfg.validate()?;
    let n_seg = victim.n_segments(x.len());
    if target.len() != n_seg {
        return Err(Error::TargetLength {
            got: target.len(),
            segments: n_seg,
        });
    }
    let holdout_hit = |xa: &Waveform, mode: &Mode| -> Result<bool> {
        match mode {
            Mode::Cw => Ok(true),
            Mode::Eot(e, _, _) => Ok(transcribe(victim, &apply_rir(xa, &e.holdout)?)? == *target),
        }
    };
    let zero = vec![0.0; x.len()];
    if transcribe(victim, x)? == *target && holdout_hit(x, &mode)? {
        return finish(x, zero, target, true, 0);
    }
    let bound = box_bound(x, cfg.eps_db);
    let mut delta = zero;
    // a tiny seeded start keeps ‖δ‖ differentiable
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for d in delta.iter_mut() {
        *d = bound * 1e-3 * rng.gen_range(-1.0..1.0);
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let stage_len = cfg.max_iters.div_ceil(cfg.c_schedule.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut iters = 0;
    for &c in &cfg.c_schedule {
        let mut state = AdamState::new(x.len());
        let mut since_hit: Option<usize> = None;
        for _ in 0..stage_len {
            if iters >= cfg.max_iters {
                break;
            }
            let (grad, hit) = match &mut mode {
                Mode::Cw => {
                    let (_, g, t) = cw_gradient(victim, x, &delta, target, c)?;
                    (g, t == *target)
                }
                Mode::Eot(e, k, r) => {
                    let draws = draw_transforms(e, e.n_mc, r);
                    let (_, g, all) = eot_gradient(victim, x, &delta, target, c, e, k, &draws)?;
                    let direct = transcribe(victim, &adv(x, &delta))? == *target;
                    (g, all && direct)
                }
            };
            // the current iterate is feasible by construction of the box
            if hit {
                let norm = l2(&delta);
                // EOT already prices ‖δ‖ through α_k, so its latest hit wins
                let eot = matches!(mode, Mode::Eot(..));
                if eot || best.as_ref().map_or(true, |(b, _)| norm < *b) {
                    best = Some((norm, delta.clone()));
                }
                since_hit.get_or_insert(0);
            }
            if let Some(s) = since_hit.as_mut() {
                *s += 1;
                if *s > cfg.refine_iters {
                    break;
                }
            }
            adam_step(&mut delta, &grad, &mut state, &adam)?;
            project(x, &mut delta, bound);
            iters += 1;
        }
        if best.is_some() {
            break;
        }
    }
    match best {
        Some((_, d)) => {
            let xa = adv(x, &d);
            let ok = transcribe(victim, &xa)? == *target && holdout_hit(&xa, &mode)?;
            let mut ex = finish(x, d, target, false, iters)?;
            ex.success = ok && ex.l_db < cfg.eps_db;
            Ok(ex)
        }
        None => finish(x, delta, target, false, iters),
    }
}

pub fn cw_attack(victim: &VictimModel, x_org: &Waveform, target: &Transcript, cfg: &AttackConfig) -> Result<AdversarialExample> {
    run(victim, x_org, target, cfg, Mode::Cw)
}

/// EOT attack; success also requires the target under `eot.holdout`.
pub fn eot_attack(
    victim: &VictimModel,
    x_org: &Waveform,
    target: &Transcript,
    cfg: &AttackConfig,
    eot: &EotConfig,
) -> Result<AdversarialExample> {
    if eot.n_mc == 0 {
        return Err(Error::Config("EOT needs at least one Monte-Carlo draw".into()));
    }
    if !(eot.noise_sigma >= 0.0) {
        return Err(Error::Config("EOT noise sigma must be non-negative".into()));
    }
    let kernels = EotKernels::new(eot, x_org.len())?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_E07);
    run(victim, x_org, target, cfg, Mode::Eot(eot, kernels, rng))
}

/// Whether `ex` transcribes to its target after passing through `h`.
pub fn succeeds_under(victim: &VictimModel, ex: &AdversarialExample, h: &RirFilter) -> Result<bool> {
    Ok(ex.l_db < 0.0 && transcribe(victim, &apply_rir(&ex.x_adv, h)?)? == ex.target)
}

/// Writes `adv_NNNN.wav` files and `manifest.txt` lines of
/// `orig target-tokens success l_db iters` (target tokens joined by `+`).
pub fn export_adversarial(dir: &Path, items: &[(String, AdversarialExample)], vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (orig, ex)) in items.iter().enumerate() {
        let name = format!("adv_{i:04}.wav");
        write_wav(&dir.join(&name), &ex.x_adv)?;
        manifest.push_str(&format!(
            "{name} {orig} {} {} {:.4} {}\n",
            vocab.render(&ex.target).replace(' ', "+"),
            ex.success,
            ex.l_db,
            ex.iters_used
        ));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests;
