use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{band_edges, gradients_at, MuBatch, ThetaMatrix};
use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, symmetric_eigen, EigenSpectrum, Matrix, SquareMatrix};
use crate::nn::{Network, Tensor};

/// Which eigenvalue vector the Θ-weighted bound is taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixMode {
    /// `η·‖w∘λ_f‖` (the bound as stated).
    FeatureGram,
    /// `η·‖w∘λ_∇‖`.
    GradientGram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub eta: f64,
    pub eigen_dim: usize,
    pub matrix_mode: MatrixMode,
    /// Weight of the hinge penalty in the critic loss.
    pub rho: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eigen_dim: 16,
            matrix_mode: MatrixMode::FeatureGram,
            rho: 10.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if !(self.eta > 0.0) || !(self.rho > 0.0) {
            return Err(Error::Config("regularizer eta and rho must be positive".into()));
        }
        if self.eigen_dim == 0 || self.eigen_dim > batch {
            return Err(Error::Config(format!(
                "eigen dimension {} must be in 1..={batch} (batch size)",
                self.eigen_dim
            )));
        }
        Ok(())
    }
}

/// Averages the last axis of an item over `n` contiguous bands (and every
/// other axis as a whole).
#[derive(Debug, Clone, PartialEq)]
pub struct BandPooling {
    /// Row-major `n x item_size`.
    pub weights: Vec<f64>,
    pub n: usize,
    pub item_size: usize,
}

impl BandPooling {
    pub fn new(item_shape: &[usize], n: usize) -> Result<Self> {
        let last = *item_shape.last().ok_or_else(|| Error::Dimension("empty item shape".into()))?;
        if n == 0 || n > last {
            return Err(Error::Dimension(format!("{n} bands over a last axis of {last}")));
        }
        let item_size: usize = item_shape.iter().product();
        let outer = item_size / last;
        let mut weights = vec![0.0; n * item_size];
        for (k, (lo, hi)) in band_edges(last, n).into_iter().enumerate() {
            let w = 1.0 / ((hi - lo) * outer) as f64;
            for o in 0..outer {
                for j in lo..hi {
                    weights[k * item_size + o * last + j] = w;
                }
            }
        }
        Ok(Self { weights, n, item_size })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                self.weights[k * self.item_size..(k + 1) * self.item_size]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    /// Adjoint of [`BandPooling::apply`].
    pub fn transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.item_size];
        for (k, gk) in g.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weights[k * self.item_size..(k + 1) * self.item_size]) {
                *o += w * gk;
            }
        }
        out
    }
}

/// `(1/b)·RᵀR` for `b` rows of width `n`.
pub fn gram(rows: &[f64], b: usize, n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for r in rows.chunks(n).take(b) {
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += r[i] * r[j];
            }
        }
    }
    m.scale(1.0 / b as f64)
}

fn first_features(features: &[f64], b: usize, width: usize, n: usize) -> Result<Vec<f64>> {
    if width < n {
        return Err(Error::Dimension(format!("feature width {width} below eigen dimension {n}")));
    }
    Ok((0..b).flat_map(|s| features[s * width..s * width + n].to_vec()).collect())
}

fn check_batch(b: usize, n: usize) -> Result<()> {
    if b < n {
        return Err(Error::Dimension(format!("batch of {b} below eigen dimension {n}")));
    }
    Ok(())
}

/// λ_f: spectrum of the Gram matrix of the critic's first `n` penultimate
/// features over the batch.
pub fn critic_eigen_spectrum(critic: &Network, batch: &Tensor, n: usize) -> Result<EigenSpectrum> {
    let b = batch.shape.first().copied().unwrap_or(0);
    check_batch(b, n)?;
    let t = critic.trace(&batch.values, b)?;
    let f = first_features(t.features(), b, critic.feature_size(), n)?;
    eigenvalues(&SquareMatrix::new(gram(&f, b, n))?)
}

/// λ_∇: spectrum of the Gram matrix of band-pooled input gradients at the μ
/// items.
pub fn gradient_eigen_spectrum(critic: &Network, mu: &MuBatch, n: usize) -> Result<EigenSpectrum> {
    let b = mu.len();
    check_batch(b, n)?;
    let pool = BandPooling::new(critic.input_shape(), n)?;
    let grads = gradients_at(critic, &mu.items)?;
    let g: Vec<f64> = grads.chunks(pool.item_size).flat_map(|r| pool.apply(r)).collect();
    eigenvalues(&SquareMatrix::new(gram(&g, b, n))?)
}

/// `max(0, Σ|λ_f − λ_∇| − η·‖w∘λ_f‖)` with positional pairing.
pub fn regularizer_penalty(lf: &EigenSpectrum, lg: &EigenSpectrum, theta: &ThetaMatrix, eta: f64) -> Result<f64> {
    penalty_anchored(&lf.values, &lg.values, &theta.band_weights, eta, MatrixMode::FeatureGram)
}

pub(crate) fn penalty_anchored(
    lf: &[Complex64],
    lg: &[Complex64],
    w: &[f64],
    eta: f64,
    mode: MatrixMode,
) -> Result<f64> {
    if lf.len() != lg.len() || lf.len() != w.len() {
        return Err(Error::Dimension(format!(
            "spectra of length {} and {} with {} band weights",
            lf.len(),
            lg.len(),
            w.len()
        )));
    }
    let gap: f64 = lf.iter().zip(lg).map(|(a, b)| (a - b).norm()).sum();
    let anchor = match mode {
        MatrixMode::FeatureGram => lf,
        MatrixMode::GradientGram => lg,
    };
    let bound = eta
        * anchor
            .iter()
            .zip(w)
            .map(|(l, wk)| wk * wk * l.norm_sqr())
            .sum::<f64>()
            .sqrt();
    Ok((gap - bound).max(0.0))
}

/// Penalty value and its gradients with respect to the two Gram inputs.
pub(crate) struct PenaltyGrad {
    pub value: f64,
    pub lf: Vec<f64>,
    pub lg: Vec<f64>,
    /// ∂P/∂F, row-major `b x n`.
    pub d_features: Vec<f64>,
    /// ∂P/∂G, row-major `b x n`.
    pub d_pooled: Vec<f64>,
}

/// Differentiates the penalty through symmetric eigen-decompositions:
/// ∂λ_k/∂R = (2/b)·R v_k v_kᵀ for A = (1/b)RᵀR.
pub(crate) fn penalty_grad(f: &[f64], g: &[f64], b: usize, w: &[f64], cfg: &RegularizerConfig) -> Result<PenaltyGrad> {
    let n = cfg.eigen_dim;
    let ef = symmetric_eigen(&SquareMatrix::new(gram(f, b, n))?)?;
    let eg = symmetric_eigen(&SquareMatrix::new(gram(g, b, n))?)?;
    let cf: Vec<Complex64> = ef.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let cg: Vec<Complex64> = eg.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let value = penalty_anchored(&cf, &cg, w, cfg.eta, cfg.matrix_mode)?;

    let mut dlf = vec![0.0; n];
    let mut dlg = vec![0.0; n];
    if value > 0.0 {
        for k in 0..n {
            let s = (ef.values[k] - eg.values[k]).signum();
            let s = if ef.values[k] == eg.values[k] { 0.0 } else { s };
            dlf[k] += s;
            dlg[k] -= s;
        }
        let (anchor, dst) = match cfg.matrix_mode {
            MatrixMode::FeatureGram => (&ef.values, &mut dlf),
            MatrixMode::GradientGram => (&eg.values, &mut dlg),
        };
        let norm = anchor.iter().zip(w).map(|(l, wk)| wk * wk * l * l).sum::<f64>().sqrt();
        if norm > 0.0 {
            for k in 0..n {
                dst[k] -= cfg.eta * w[k] * w[k] * anchor[k] / norm;
            }
        }
    }
    let d_features = eig_backward(f, b, n, &ef.vectors, &dlf);
    let d_pooled = eig_backward(g, b, n, &eg.vectors, &dlg);
    Ok(PenaltyGrad {
        value,
        lf: ef.values,
        lg: eg.values,
        d_features,
        d_pooled,
    })
}

// Σ_k c_k (2/b) R v_k v_kᵀ
fn eig_backward(r: &[f64], b: usize, n: usize, vecs: &Matrix, coef: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * n];
    for (k, c) in coef.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        let v: Vec<f64> = (0..n).map(|i| vecs[(i, k)]).collect();
        for s in 0..b {
            let row = &r[s * n..(s + 1) * n];
            let proj: f64 = row.iter().zip(&v).map(|(a, bb)| a * bb).sum();
            let scale = c * 2.0 / b as f64 * proj;
            for i in 0..n {
                out[s * n + i] += scale * v[i];
            }
        }
    }
    out
}
