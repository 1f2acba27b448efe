//! Seeded GAN training with the Sobolev-IPM critic, mode counting and
//! collapse detection.

mod telemetry;
mod train;

pub use telemetry::{detect_collapse, gc_count, gc_increments, mean_pairwise_distance, LogRecord};
pub use train::{train, Architecture, StabilityStats, TrainConfig, TrainIo, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Tensor};

/// Isotropic Gaussians with centres evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 2.0,
            std: 0.05,
        }
    }
}

impl RingSpec {
    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.modes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / self.modes as f64;
                vec![self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    /// Centres with an assignment radius of three standard deviations.
    pub fn mode_spec(&self) -> Result<ModeSpec> {
        ModeSpec::new(self.centers(), 3.0 * self.std)
    }
}

/// Training data: an endless seeded ring sampler or a fixed table of items
/// drawn with replacement.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Ring(RingSpec),
    Table { item_shape: Vec<usize>, values: Vec<f64> },
}

impl Dataset {
    pub fn table(item_shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let d: usize = item_shape.iter().product();
        if d == 0 || values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if values.len() % d != 0 {
            return Err(Error::Dimension(format!("{} values for items of size {d}", values.len())));
        }
        Ok(Self::Table { item_shape, values })
    }

    pub fn item_shape(&self) -> Vec<usize> {
        match self {
            Dataset::Ring(_) => vec![2],
            Dataset::Table { item_shape, .. } => item_shape.clone(),
        }
    }

    pub fn item_size(&self) -> usize {
        self.item_shape().iter().product()
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            Dataset::Ring(_) => None,
            Dataset::Table { values, .. } => Some(values.len() / self.item_size()),
        }
    }

    pub fn mode_spec(&self) -> Option<ModeSpec> {
        match self {
            Dataset::Ring(r) => r.mode_spec().ok(),
            Dataset::Table { .. } => None,
        }
    }

    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut shape = vec![batch];
        shape.extend(self.item_shape());
        let values = match self {
            Dataset::Ring(r) => {
                if r.modes == 0 {
                    return Err(Error::EmptyDataset);
                }
                let centers = r.centers();
                let mut v = Vec::with_capacity(2 * batch);
                for _ in 0..batch {
                    let c = &centers[rng.gen_range(0..r.modes)];
                    for x in c {
                        let e: f64 = StandardNormal.sample(rng);
                        v.push(x + r.std * e);
                    }
                }
                v
            }
            Dataset::Table { values, .. } => {
                let d = self.item_size();
                let n = values.len() / d;
                let mut v = Vec::with_capacity(batch * d);
                for _ in 0..batch {
                    let i = rng.gen_range(0..n);
                    v.extend_from_slice(&values[i * d..(i + 1) * d]);
                }
                v
            }
        };
        Tensor::new(shape, values)
    }
}

/// Mode centres with the radius within which a sample counts as hitting one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
}

impl ModeSpec {
    pub fn new(centers: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::Config("need at least two mode centres".into()));
        }
        let d = centers[0].len();
        if d == 0 || centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config("mode centres must share one positive dimension".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Config("mode radius must be positive".into()));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if dist(&centers[i], &centers[j]) <= 2.0 * radius {
                    return Err(Error::Config(format!("mode centres {j} and {i} overlap at radius {radius}")));
                }
            }
        }
        Ok(Self { centers, radius })
    }

    /// Index of the centre within `radius` of `x`, if any.
    pub fn assign(&self, x: &[f64]) -> Option<usize> {
        self.centers.iter().position(|c| dist(c, x) <= self.radius)
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Anything that maps seeded latents to a batch of samples.
pub trait Generate {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor>;
}

impl Generate for Network {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        let z = latent_batch(self.input_size(), n, &mut ChaCha8Rng::seed_from_u64(seed));
        let t = self.trace(&z, n)?;
        let mut shape = vec![n];
        shape.extend(self.output_shape());
        Tensor::new(shape, t.output().to_vec())
    }
}

pub(crate) fn latent_batch(dim: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim * n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Number of distinct mode centres hit by `n_samples` generated samples.
pub fn count_modes(generator: &dyn Generate, modes: &ModeSpec, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples < modes.centers.len() {
        return Err(Error::Config(format!(
            "{n_samples} samples for {} modes",
            modes.centers.len()
        )));
    }
    let out = generator.generate(n_samples, seed)?;
    let d = modes.centers[0].len();
    if out.len() != n_samples * d {
        return Err(Error::Dimension(format!(
            "generated {} values for {n_samples} samples of dimension {d}",
            out.len()
        )));
    }
    let mut hit = vec![false; modes.centers.len()];
    for x in out.values.chunks(d) {
        if let Some(k) = modes.assign(x) {
            hit[k] = true;
        }
    }
    Ok(hit.iter().filter(|h| **h).count() as f64)
}
