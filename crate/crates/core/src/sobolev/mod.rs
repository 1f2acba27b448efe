//! Empirical Sobolev IPM with the augmented-Lagrangian gradient constraint,
//! and the eigenvalue-gap regularizer weighted by RIR-coloured noise.

mod regularizer;
mod theta;

pub use regularizer::{
    critic_eigen_spectrum, gradient_eigen_spectrum, gram, regularizer_penalty, BandPooling,
    MatrixMode, RegularizerConfig,
};
pub use theta::{build_theta, ThetaMatrix, BAND_WEIGHT_FLOOR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Tensor};
use regularizer::penalty_grad;

/// `n` contiguous index ranges covering `0..len`.
pub(crate) fn band_edges(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|k| (k * len / n, (k + 1) * len / n)).collect()
}

/// Items drawn from the even mixture of real and generated samples: item `i`
/// is `real[i]` or `fake[i]` by a seeded fair coin.
#[derive(Debug, Clone, PartialEq)]
pub struct MuBatch {
    pub items: Tensor,
    pub from_real: Vec<bool>,
}

impl MuBatch {
    pub fn len(&self) -> usize {
        self.from_real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.from_real.is_empty()
    }

    /// Row of item `i` in the stacked `[real; fake]` batch.
    pub fn stacked_index(&self, i: usize) -> usize {
        if self.from_real[i] {
            i
        } else {
            self.len() + i
        }
    }
}

fn batch_size(t: &Tensor) -> usize {
    t.shape.first().copied().unwrap_or(0)
}

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<usize> {
    let b = batch_size(real);
    if b == 0 || real.is_empty() || batch_size(fake) == 0 {
        return Err(Error::EmptyBatch);
    }
    if real.shape != fake.shape {
        return Err(Error::Shape {
            expected: real.shape.clone(),
            got: fake.shape.clone(),
        });
    }
    Ok(b)
}

pub fn mixture_sample(real: &Tensor, fake: &Tensor, seed: u64) -> Result<MuBatch> {
    let b = check_pair(real, fake)?;
    let d = real.len() / b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let from_real: Vec<bool> = (0..b).map(|_| rng.gen::<bool>()).collect();
    let mut values = Vec::with_capacity(real.len());
    for (i, r) in from_real.iter().enumerate() {
        let src = if *r { real } else { fake };
        values.extend_from_slice(&src.values[i * d..(i + 1) * d]);
    }
    Ok(MuBatch {
        items: Tensor::new(real.shape.clone(), values)?,
        from_real,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SipmEstimate {
    pub ipm_value: f64,
    /// Mean of ‖∇ₓ f‖² over the μ items.
    pub sobolev_term: f64,
    pub penalty: f64,
    pub eta: f64,
}

/// ∇ₓ f at every item of a batch.
pub fn gradients_at(critic: &Network, items: &Tensor) -> Result<Vec<f64>> {
    let b = batch_size(items);
    let t = critic.trace(&items.values, b)?;
    Ok(critic.backprop(&t, &vec![1.0; b])?.input)
}

pub fn sipm_objective(critic: &Network, real: &Tensor, fake: &Tensor, mu: &MuBatch) -> Result<SipmEstimate> {
    let b = check_pair(real, fake)?;
    let fr = critic.trace(&real.values, b)?;
    let ff = critic.trace(&fake.values, b)?;
    let ipm_value = fr.output().iter().sum::<f64>() / b as f64 - ff.output().iter().sum::<f64>() / b as f64;
    let g = gradients_at(critic, &mu.items)?;
    let sobolev_term = g.iter().map(|v| v * v).sum::<f64>() / mu.len() as f64;
    Ok(SipmEstimate {
        ipm_value,
        sobolev_term,
        penalty: 0.0,
        eta: RegularizerConfig::default().eta,
    })
}

/// Terms of the critic loss `−ipm − λ(1−Ω) + (ρ/2)(1−Ω)² + ρ_reg·P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub constraint: bool,
    /// Augmented-Lagrangian penalty weight ρ.
    pub rho_al: f64,
    pub regularizer: Option<RegularizerConfig>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            constraint: true,
            rho_al: 1.0,
            regularizer: Some(RegularizerConfig::default()),
        }
    }
}

impl ObjectiveConfig {
    /// Reverse passes through the critic per critic step.
    pub fn passes_per_step(&self) -> u64 {
        1 + self.constraint as u64 + 2 * self.regularizer.is_some() as u64
    }
}

#[derive(Debug, Clone)]
pub struct CriticGradient {
    pub grads: Vec<f64>,
    pub loss: f64,
    pub estimate: SipmEstimate,
    /// Reverse passes spent on this gradient.
    pub passes: u64,
    pub lambda_f: Vec<f64>,
    pub lambda_grad: Vec<f64>,
}

/// Critic-loss gradient. One reverse pass over `[real; fake]` gives the IPM
/// gradient and ∇ₓ f at the μ items; the constraint adds one dual pass and
/// the regularizer a feature pass plus one dual pass.
pub fn critic_gradient(
    critic: &Network,
    real: &Tensor,
    fake: &Tensor,
    mu: &MuBatch,
    lambda: f64,
    cfg: &ObjectiveConfig,
    theta: Option<&ThetaMatrix>,
) -> Result<CriticGradient> {
    let b = check_pair(real, fake)?;
    if mu.len() != b {
        return Err(Error::LengthMismatch(mu.len(), b));
    }
    let d = critic.input_size();
    let start = critic.backward_passes();
    let mut x = real.values.clone();
    x.extend_from_slice(&fake.values);
    let t = critic.trace(&x, 2 * b)?;
    let out = t.output();
    let ipm = out[..b].iter().sum::<f64>() / b as f64 - out[b..].iter().sum::<f64>() / b as f64;
    let inv_b = 1.0 / b as f64;
    let up: Vec<f64> = (0..2 * b).map(|s| if s < b { -inv_b } else { inv_b }).collect();
    let g = critic.backprop(&t, &up)?;
    let mut grads = g.params;

    let mut mu_x = Vec::with_capacity(b * d);
    let mut mu_g = Vec::with_capacity(b * d);
    for i in 0..b {
        let s = mu.stacked_index(i);
        mu_x.extend_from_slice(&x[s * d..(s + 1) * d]);
        mu_g.extend(g.input[s * d..(s + 1) * d].iter().map(|v| v / up[s]));
    }
    let omega = mu_g.iter().map(|v| v * v).sum::<f64>() * inv_b;
    let mut loss = -ipm;
    let ones = vec![1.0; b];

    if cfg.constraint {
        let gap = 1.0 - omega;
        loss += -lambda * gap + 0.5 * cfg.rho_al * gap * gap;
        let coef = (lambda - cfg.rho_al * gap) * 2.0 * inv_b;
        let dir: Vec<f64> = mu_g.iter().map(|v| v * coef).collect();
        let mg = critic.mixed_param_grad(&mu_x, &dir, &ones, b)?;
        add_into(&mut grads, &mg);
    }

    let mut penalty = 0.0;
    let mut lambda_f = Vec::new();
    let mut lambda_grad = Vec::new();
    let eta = cfg.regularizer.map_or(RegularizerConfig::default().eta, |r| r.eta);
    if let Some(rc) = &cfg.regularizer {
        rc.validate(b)?;
        let theta = theta.ok_or_else(|| Error::Config("regularizer needs a theta matrix".into()))?;
        let n = rc.eigen_dim;
        if theta.band_weights.len() != n {
            return Err(Error::Dimension(format!(
                "{} band weights for eigen dimension {n}",
                theta.band_weights.len()
            )));
        }
        let width = critic.feature_size();
        if width < n {
            return Err(Error::Dimension(format!("feature width {width} below eigen dimension {n}")));
        }
        let feats = t.features();
        let mut f = Vec::with_capacity(b * n);
        for i in 0..b {
            let s = mu.stacked_index(i);
            f.extend_from_slice(&feats[s * width..s * width + n]);
        }
        let pool = BandPooling::new(critic.input_shape(), n)?;
        let pooled: Vec<f64> = mu_g.chunks(d).flat_map(|r| pool.apply(r)).collect();
        let pg = penalty_grad(&f, &pooled, b, &theta.band_weights, rc)?;
        penalty = pg.value;
        loss += rc.rho * penalty;

        let mut up_feat = vec![0.0; 2 * b * width];
        for i in 0..b {
            let s = mu.stacked_index(i);
            for j in 0..n {
                up_feat[s * width + j] = rc.rho * pg.d_features[i * n + j];
            }
        }
        let gf = critic.backprop_from(&t, critic.n_layers() - 1, &up_feat)?;
        add_into(&mut grads, &gf.params);

        let dir: Vec<f64> = pg
            .d_pooled
            .chunks(n)
            .flat_map(|r| pool.transpose(r).into_iter().map(|v| v * rc.rho))
            .collect();
        let mg = critic.mixed_param_grad(&mu_x, &dir, &ones, b)?;
        add_into(&mut grads, &mg);
        lambda_f = pg.lf;
        lambda_grad = pg.lg;
    }

    Ok(CriticGradient {
        grads,
        loss,
        estimate: SipmEstimate {
            ipm_value: ipm,
            sobolev_term: omega,
            penalty,
            eta,
        },
        passes: critic.backward_passes() - start,
        lambda_f,
        lambda_grad,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;
