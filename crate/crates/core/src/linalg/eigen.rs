use num_complex::Complex64;

use super::schur::{schur_decompose, DEFAULT_TOL};
use super::{frobenius_norm, spectral_order, EigenSpectrum, Matrix, SquareMatrix};
use crate::error::{Error, Result};

/// Conditioning limit above which an eigenvector basis is treated as
/// numerically defective.
pub const MAX_CONDITION: f64 = 1e8;

const SWEEPS_PER_DIM: usize = 60;

fn sweep_budget(n: usize) -> usize {
    SWEEPS_PER_DIM * n.max(4)
}

pub fn eigenvalues(m: &SquareMatrix) -> Result<EigenSpectrum> {
    let f = schur_decompose(m, sweep_budget(m.dim()), DEFAULT_TOL)?;
    Ok(EigenSpectrum::new(read_blocks(&f.t)))
}

fn read_blocks(t: &Matrix) -> Vec<Complex64> {
    let n = t.rows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (l1, l2) = block_eigs(t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            out.push(l1);
            out.push(l2);
            i += 2;
        } else {
            out.push(Complex64::new(t[(i, i)], 0.0));
            i += 1;
        }
    }
    out
}

fn block_eigs(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let half_tr = 0.5 * (a + d);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (Complex64::new(half_tr + s, 0.0), Complex64::new(half_tr - s, 0.0))
    } else {
        let s = (-disc).sqrt();
        (Complex64::new(half_tr, s), Complex64::new(half_tr, -s))
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// `vectors` holds unit eigenvectors as columns, aligned with `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.rows()).map(|i| self.vectors[(i, k)]).collect()
    }
}

/// Symmetric eigensolver. The input is symmetrised as (m + mᵀ)/2; values are
/// ordered like [`EigenSpectrum`].
pub fn symmetric_eigen(m: &SquareMatrix) -> Result<SymmetricEigen> {
    let n = m.dim();
    let mut a = m.add(&m.transpose())?.scale(0.5);
    let mut v = Matrix::identity(n);
    let scale = frobenius_norm(&a);
    let max_sweeps = 100;
    let mut converged = scale == 0.0;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        // rounding leaves off-diagonal mass of order n·ε·‖A‖ behind
        if off <= n as f64 * f64::EPSILON * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: max_sweeps });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        spectral_order(
            &Complex64::new(a[(i, i)], 0.0),
            &Complex64::new(a[(j, j)], 0.0),
        )
    });
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, k)] = v[(r, i)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Eigenvalues in spectral order with unit-norm eigenvectors; `vectors[k]`
/// belongs to `values[k]`.
pub fn eigenvectors(m: &SquareMatrix) -> Result<(EigenSpectrum, Vec<Vec<Complex64>>)> {
    let n = m.dim();
    if m.is_symmetric(1e-12) {
        let s = symmetric_eigen(m)?;
        let vecs = (0..n)
            .map(|k| s.vector(k).into_iter().map(|x| Complex64::new(x, 0.0)).collect())
            .collect();
        let values = s.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        return Ok((EigenSpectrum { values }, vecs));
    }

    let f = schur_decompose(m, sweep_budget(n), DEFAULT_TOL)?;
    let mut t: Vec<Vec<Complex64>> = (0..n)
        .map(|i| (0..n).map(|j| Complex64::new(f.t[(i, j)], 0.0)).collect())
        .collect();
    let mut q: Vec<Vec<Complex64>> = (0..n)
        .map(|i| (0..n).map(|j| Complex64::new(f.q[(i, j)], 0.0)).collect())
        .collect();

    // split each 2x2 block with a unitary rotation
    let mut k = 0;
    while k + 1 < n {
        if t[k + 1][k] == Complex64::new(0.0, 0.0) {
            k += 1;
            continue;
        }
        let (a, b, c, d) = (t[k][k], t[k][k + 1], t[k + 1][k], t[k + 1][k + 1]);
        let (lam, _) = block_eigs(a.re, b.re, c.re, d.re);
        let (u1, u2) = if b.norm() >= c.norm() {
            (b, lam - a)
        } else {
            (lam - d, c)
        };
        let nrm = (u1.norm_sqr() + u2.norm_sqr()).sqrt();
        let (g11, g21) = (u1 / nrm, u2 / nrm);
        let (g12, g22) = (-g21.conj(), g11.conj());
        // rows: T <- G^H T
        for j in 0..n {
            let x = t[k][j];
            let y = t[k + 1][j];
            t[k][j] = g11.conj() * x + g21.conj() * y;
            t[k + 1][j] = g12.conj() * x + g22.conj() * y;
        }
        // columns: T <- T G, Q <- Q G
        for row in t.iter_mut().chain(q.iter_mut()) {
            let x = row[k];
            let y = row[k + 1];
            row[k] = x * g11 + y * g21;
            row[k + 1] = x * g12 + y * g22;
        }
        t[k + 1][k] = Complex64::new(0.0, 0.0);
        k += 2;
    }

    let tnorm = t
        .iter()
        .flatten()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * tnorm;
    let mut pairs: Vec<(Complex64, Vec<Complex64>)> = Vec::with_capacity(n);
    for k in 0..n {
        let lam = t[k][k];
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        y[k] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for j in i + 1..=k {
                s += t[i][j] * y[j];
            }
            let mut den = t[i][i] - lam;
            if den.norm() < small {
                den = Complex64::new(small, 0.0);
            }
            y[i] = -s / den;
        }
        let mut v: Vec<Complex64> = (0..n)
            .map(|r| (0..=k).map(|j| q[r][j] * y[j]).sum())
            .collect();
        let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for z in &mut v {
            *z /= nrm;
        }
        pairs.push((lam, v));
    }
    pairs.sort_by(|a, b| spectral_order(&a.0, &b.0));
    let values = pairs.iter().map(|p| p.0).collect();
    let vecs = pairs.into_iter().map(|p| p.1).collect();
    Ok((EigenSpectrum { values }, vecs))
}

/// 2-norm condition number of the matrix whose columns are `columns`.
pub fn condition_number_2(columns: &[Vec<Complex64>]) -> Result<f64> {
    let sv = complex_singular_values(columns)?;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

// One-sided Jacobi on the real embedding [[Re, -Im], [Im, Re]], whose singular
// values are those of the complex matrix, each repeated twice.
fn complex_singular_values(columns: &[Vec<Complex64>]) -> Result<Vec<f64>> {
    let n = columns.len();
    let m = columns.first().map_or(0, |c| c.len());
    if n == 0 || columns.iter().any(|c| c.len() != m) {
        return Err(Error::Dimension("eigenvector columns are ragged or empty".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    for c in columns {
        cols.push(c.iter().map(|z| z.re).chain(c.iter().map(|z| z.im)).collect());
    }
    for c in columns {
        cols.push(c.iter().map(|z| -z.im).chain(c.iter().map(|z| z.re)).collect());
    }
    let k = cols.len();
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let xp = *x;
                    *x = c * xp - s * *y;
                    *y = s * xp + c * *y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    // keep one of each duplicated pair
    Ok(sv.into_iter().step_by(2).collect())
}

/// κ₂(V)·‖e‖_F, where V is the unit-column eigenvector basis of `a`. Every
/// eigenvalue of a + e lies within this distance of the spectrum of `a`.
pub fn bauer_fike_bound(a: &SquareMatrix, e: &SquareMatrix) -> Result<f64> {
    if a.dim() != e.dim() {
        return Err(Error::Dimension(format!(
            "perturbation is {}x{}, matrix is {}x{}",
            e.dim(),
            e.dim(),
            a.dim(),
            a.dim()
        )));
    }
    let (_, vecs) = eigenvectors(a)?;
    let kappa = condition_number_2(&vecs)?;
    if !kappa.is_finite() || kappa >= MAX_CONDITION {
        return Err(Error::NotDiagonalizable(kappa));
    }
    Ok(kappa * frobenius_norm(e))
}

/// Largest distance from an eigenvalue of a + e to the nearest eigenvalue of a.
pub fn max_displacement(a: &SquareMatrix, e: &SquareMatrix) -> Result<f64> {
    let base = eigenvalues(a)?;
    let pert = eigenvalues(&SquareMatrix::new(a.add(e)?)?)?;
    Ok(pert
        .values
        .iter()
        .map(|mu| {
            base.values
                .iter()
                .map(|l| (mu - l).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max))
}
