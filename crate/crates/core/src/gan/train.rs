use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::telemetry::{detect_collapse, mean_pairwise_distance, LogRecord};
use super::{count_modes, latent_batch, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_discriminator, build_generator, build_mlp, checkpoint, AdamConfig, AdamState};
use crate::nn::{DiscSpec, GenSpec, MlpSpec, Network, Tensor};
use crate::sobolev::{critic_gradient, mixture_sample, ObjectiveConfig, RegularizerConfig, ThetaMatrix};

const COLLAPSE_WINDOW: usize = 50;
const COLLAPSE_FRACTION: f64 = 0.1;
const MODE_BATCHES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected generator and critic for low-dimensional data.
    Mlp {
        latent_dim: usize,
        gen_hidden: Vec<usize>,
        critic_hidden: Vec<usize>,
    },
    /// Residual/non-local generator and residual critic for 2-D patches.
    Conv { generator: GenSpec, critic: DiscSpec },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp {
            latent_dim: 8,
            gen_hidden: vec![64, 64, 64],
            critic_hidden: vec![64, 64, 64],
        }
    }
}

impl Architecture {
    pub fn build(&self, item_shape: &[usize], gen_seed: u64, critic_seed: u64) -> Result<(Network, Network)> {
        let (g, c) = match self {
            Architecture::Mlp {
                latent_dim,
                gen_hidden,
                critic_hidden,
            } => {
                let d: usize = item_shape.iter().product();
                let g = build_mlp(
                    &MlpSpec {
                        input_dim: *latent_dim,
                        hidden: gen_hidden.clone(),
                        output_dim: d,
                        weight_norm: true,
                        logit_head: false,
                    },
                    gen_seed,
                )?;
                let c = build_mlp(
                    &MlpSpec {
                        input_dim: d,
                        hidden: critic_hidden.clone(),
                        output_dim: 1,
                        weight_norm: true,
                        logit_head: true,
                    },
                    critic_seed,
                )?;
                (g, c)
            }
            Architecture::Conv { generator, critic } => {
                (build_generator(generator, gen_seed)?, build_discriminator(critic, critic_seed)?)
            }
        };
        let size = |s: &[usize]| s.iter().product::<usize>();
        if size(g.output_shape()) != size(item_shape) || size(c.input_shape()) != size(item_shape) {
            return Err(Error::Config(format!(
                "networks map {:?} -> {:?} -> critic {:?}, data items are {item_shape:?}",
                g.input_shape(),
                g.output_shape(),
                c.input_shape()
            )));
        }
        Ok((g, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub critic_steps: usize,
    pub total_iters: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub adam_beta1: f64,
    /// Sobolev constraint on E_μ‖∇ₓf‖².
    pub constraint: bool,
    pub rho_al: f64,
    pub regularizer: bool,
    pub regularizer_config: RegularizerConfig,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            critic_steps: 1,
            total_iters: 2000,
            lr_generator: 1e-3,
            lr_critic: 1e-3,
            adam_beta1: 0.5,
            constraint: true,
            rho_al: 0.1,
            regularizer: true,
            regularizer_config: RegularizerConfig {
                eigen_dim: 2,
                ..RegularizerConfig::default()
            },
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            constraint: self.constraint,
            rho_al: self.rho_al,
            regularizer: self.regularizer.then_some(self.regularizer_config),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("at least one critic step per generator step".into()));
        }
        if !(self.lr_generator > 0.0) || !(self.lr_critic > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::Config("adam beta1 must lie in [0, 1)".into()));
        }
        if self.constraint && !(self.rho_al > 0.0) {
            return Err(Error::Config("augmented-Lagrangian rho must be positive".into()));
        }
        if self.regularizer {
            self.regularizer_config.validate(self.batch_size)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStats {
    pub iterations_to_collapse: Option<usize>,
    /// Modes hit per batch of generated samples, averaged over several
    /// batches; `None` for data without mode centres.
    pub modes_learned_per_batch: Option<f64>,
    pub gc_per_batch: u64,
}

/// Optional outputs: JSONL log (flushed every iteration) and checkpoints
/// (written at the end, or at the last good state on a non-finite loss).
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: Network,
    pub critic: Network,
    pub generator_adam: AdamState,
    pub critic_adam: AdamState,
    pub stats: StabilityStats,
    pub log: Vec<LogRecord>,
    /// Final Lagrange multiplier of the Sobolev constraint.
    pub lambda: f64,
}

fn save_checkpoints(io: &TrainIo, g: &Network, ga: &AdamState, c: &Network, ca: &AdamState) -> Result<()> {
    if let Some(dir) = &io.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join("generator.ckpt"), g, Some(ga))?;
        checkpoint::save(&dir.join("critic.ckpt"), c, Some(ca))?;
    }
    Ok(())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn train(cfg: &TrainConfig, data: &Dataset, theta: Option<&ThetaMatrix>, io: &TrainIo) -> Result<TrainOutcome> {
    cfg.validate()?;
    let objective = cfg.objective();
    if cfg.regularizer {
        let th = theta.ok_or_else(|| Error::Config("regularizer needs a theta matrix".into()))?;
        if th.band_weights.len() != cfg.regularizer_config.eigen_dim {
            return Err(Error::Config(format!(
                "theta has {} band weights, eigen dimension is {}",
                th.band_weights.len(),
                cfg.regularizer_config.eigen_dim
            )));
        }
    }
    let item_shape = data.item_shape();
    let d = data.item_size();
    let b = cfg.batch_size;

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut gen, mut critic) = cfg.architecture.build(&item_shape, master.gen(), master.gen())?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut z_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut mix_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let floor_seed: u64 = master.gen();
    let mode_seed: u64 = master.gen();

    let reference = data.sample(512.min(data.len().unwrap_or(512)).max(2), &mut ChaCha8Rng::seed_from_u64(floor_seed))?;
    let floor = COLLAPSE_FRACTION * mean_pairwise_distance(&reference.values, d);

    let gen_adam_cfg = AdamConfig {
        beta1: cfg.adam_beta1,
        ..AdamConfig::with_lr(cfg.lr_generator)
    };
    let critic_adam_cfg = AdamConfig {
        beta1: cfg.adam_beta1,
        ..AdamConfig::with_lr(cfg.lr_critic)
    };
    let mut gen_adam = AdamState::new(gen.n_params());
    let mut critic_adam = AdamState::new(critic.n_params());

    let mut writer = match &io.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.total_iters);
    let mut lambda = 0.0;
    let mut gc_cum = 0u64;
    let mut batch_shape = vec![b];
    batch_shape.extend(&item_shape);
    let latent = gen.input_size();

    for iter in 0..cfg.total_iters {
        let mut last = None;
        for _ in 0..cfg.critic_steps {
            let real = data.sample(b, &mut data_rng)?;
            let z = latent_batch(latent, b, &mut z_rng);
            let fake = Tensor::new(batch_shape.clone(), gen.trace(&z, b)?.output().to_vec())?;
            let mu = mixture_sample(&real, &fake, mix_rng.gen())?;
            let cg = critic_gradient(&critic, &real, &fake, &mu, lambda, &objective, theta)?;
            if !cg.loss.is_finite() || !all_finite(&cg.grads) {
                save_checkpoints(io, &gen, &gen_adam, &critic, &critic_adam)?;
                return Err(Error::NonFiniteLoss { iteration: iter });
            }
            critic.adam_update(&cg.grads, &mut critic_adam, &critic_adam_cfg)?;
            if cfg.constraint {
                lambda -= cfg.rho_al * (1.0 - cg.estimate.sobolev_term);
            }
            gc_cum += cg.passes;
            last = Some(cg.estimate);
        }
        let est = last.expect("at least one critic step");

        let z = latent_batch(latent, b, &mut z_rng);
        let gt = gen.trace(&z, b)?;
        let fake = gt.output();
        let diversity = mean_pairwise_distance(fake, d);
        let ct = critic.trace(fake, b)?;
        let gen_loss = -ct.output().iter().sum::<f64>() / b as f64;
        let through = critic.backprop(&ct, &vec![-1.0 / b as f64; b])?;
        let gg = gen.backprop(&gt, &through.input)?;
        if !gen_loss.is_finite() || !all_finite(&gg.params) {
            save_checkpoints(io, &gen, &gen_adam, &critic, &critic_adam)?;
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        gen.adam_update(&gg.params, &mut gen_adam, &gen_adam_cfg)?;

        let rec = LogRecord {
            iter,
            ipm_value: est.ipm_value,
            sobolev_term: est.sobolev_term,
            penalty: est.penalty,
            diversity,
            gc_cum,
        };
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        log.push(rec);
    }

    let modes_learned_per_batch = match data.mode_spec() {
        Some(ms) => {
            let mut total = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(mode_seed);
            for _ in 0..MODE_BATCHES {
                total += count_modes(&gen, &ms, b.max(ms.centers.len()), rng.gen())?;
            }
            Some(total / MODE_BATCHES as f64)
        }
        None => None,
    };
    let stats = StabilityStats {
        iterations_to_collapse: detect_collapse(&log, COLLAPSE_WINDOW, floor),
        modes_learned_per_batch,
        gc_per_batch: super::gc_count(&log),
    };
    save_checkpoints(io, &gen, &gen_adam, &critic, &critic_adam)?;
    Ok(TrainOutcome {
        generator: gen,
        critic,
        generator_adam: gen_adam,
        critic_adam,
        stats,
        log,
        lambda,
    })
}
