use super::{Matrix, SquareMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = f64::EPSILON;

/// Real Schur form `m = q t q^T` with `q` orthonormal and `t` quasi upper
/// triangular (1x1 and 2x2 diagonal blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct SchurForm {
    pub q: Matrix,
    pub t: Matrix,
}

impl SchurForm {
    pub fn reconstruct(&self) -> Matrix {
        self.q
            .matmul(&self.t)
            .and_then(|qt| qt.matmul(&self.q.transpose()))
            .expect("square factors")
    }
}

/// Householder Hessenberg reduction followed by Francis double-shift QR.
///
/// `max_iters` bounds the total number of QR sweeps; `tol` is the relative
/// deflation threshold on sub-diagonal entries.
pub fn schur_decompose(m: &SquareMatrix, max_iters: usize, tol: f64) -> Result<SchurForm> {
    let n = m.dim();
    let mut h = m.matrix().clone();
    let mut v = Matrix::identity(n);
    hessenberg(&mut h, &mut v);
    francis_qr(&mut h, &mut v, max_iters, tol)?;
    Ok(SchurForm { q: v, t: h })
}

fn hessenberg(h: &mut Matrix, v: &mut Matrix) {
    let n = h.rows();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[(i, m - 1)].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[(i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;

        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[(i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[(i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[(i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[(i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[(m, m - 1)] = scale * g;
    }

    for m in (1..high).rev() {
        if h[(m, m - 1)] == 0.0 {
            continue;
        }
        for i in m + 1..=high {
            ort[i] = h[(i, m - 1)];
        }
        for j in m..=high {
            let mut g = 0.0;
            for i in m..=high {
                g += ort[i] * v[(i, j)];
            }
            // two divisions avoid underflow
            g = (g / ort[m]) / h[(m, m - 1)];
            for i in m..=high {
                v[(i, j)] += g * ort[i];
            }
        }
    }
    // the Householder vectors were parked below the sub-diagonal
    for i in 0..n {
        for j in 0..i.saturating_sub(1) {
            h[(i, j)] = 0.0;
        }
    }
}

#[allow(unused_assignments)]
fn francis_qr(h: &mut Matrix, v: &mut Matrix, max_iters: usize, tol: f64) -> Result<()> {
    let nn = h.rows();
    let low = 0usize;
    let high = nn - 1;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut w, mut x, mut y);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[(i, j)].abs();
        }
    }

    let mut sweeps = 0usize;
    let mut iter = 0usize;
    let mut n = nn as isize - 1;
    while n >= low as isize {
        let nu = n as usize;
        let mut l = nu;
        while l > low {
            s = h[(l - 1, l - 1)].abs() + h[(l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[(l, l - 1)].abs() <= tol * s {
                h[(l, l - 1)] = 0.0;
                break;
            }
            l -= 1;
        }

        if l == nu {
            h[(nu, nu)] += exshift;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            p = (h[(nu - 1, nu - 1)] - h[(nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[(nu, nu)] += exshift;
            h[(nu - 1, nu - 1)] += exshift;

            if q >= 0.0 {
                // real pair: rotate the block to upper triangular
                z = if p >= 0.0 { p + z } else { p - z };
                x = h[(nu, nu - 1)];
                s = x.abs() + z.abs();
                p = x / s;
                q = z / s;
                r = (p * p + q * q).sqrt();
                p /= r;
                q /= r;
                for j in nu - 1..nn {
                    z = h[(nu - 1, j)];
                    h[(nu - 1, j)] = q * z + p * h[(nu, j)];
                    h[(nu, j)] = q * h[(nu, j)] - p * z;
                }
                for i in 0..=nu {
                    z = h[(i, nu - 1)];
                    h[(i, nu - 1)] = q * z + p * h[(i, nu)];
                    h[(i, nu)] = q * h[(i, nu)] - p * z;
                }
                for i in low..=high {
                    z = v[(i, nu - 1)];
                    v[(i, nu - 1)] = q * z + p * v[(i, nu)];
                    v[(i, nu)] = q * v[(i, nu)] - p * z;
                }
                h[(nu, nu - 1)] = 0.0;
            }
            n -= 2;
            iter = 0;
        } else {
            sweeps += 1;
            if sweeps > max_iters {
                return Err(Error::NoConvergence { iterations: sweeps - 1 });
            }
            x = h[(nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < nu {
                y = h[(nu - 1, nu - 1)];
                w = h[(nu, nu - 1)] * h[(nu - 1, nu)];
            }
            // exceptional shifts
            if iter == 10 {
                exshift += x;
                for i in low..=nu {
                    h[(i, i)] -= x;
                }
                s = h[(nu, nu - 1)].abs() + h[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in low..=nu {
                        h[(i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;

            // look for two consecutive small sub-diagonal elements
            let mut m = nu - 2;
            loop {
                z = h[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[(m + 1, m)] + h[(m, m + 1)];
                q = h[(m + 1, m + 1)] - z - r - s;
                r = h[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[(m, m - 1)].abs() * (q.abs() + r.abs())
                    < tol
                        * (p.abs()
                            * (h[(m - 1, m - 1)].abs() + z.abs() + h[(m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }

            for i in m + 2..=nu {
                h[(i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[(i, i - 3)] = 0.0;
                }
            }

            // double QR step on rows l..=n, columns m..=n
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[(k, k - 1)];
                    q = h[(k + 1, k - 1)];
                    r = if notlast { h[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[(k, k - 1)] = -s * x;
                    } else if l != m {
                        h[(k, k - 1)] = -h[(k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..nn {
                        p = h[(k, j)] + q * h[(k + 1, j)];
                        if notlast {
                            p += r * h[(k + 2, j)];
                            h[(k + 2, j)] -= p * z;
                        }
                        h[(k, j)] -= p * x;
                        h[(k + 1, j)] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[(i, k)] + y * h[(i, k + 1)];
                        if notlast {
                            p += z * h[(i, k + 2)];
                            h[(i, k + 2)] -= p * r;
                        }
                        h[(i, k)] -= p;
                        h[(i, k + 1)] -= p * q;
                    }
                    for i in low..=high {
                        p = x * v[(i, k)] + y * v[(i, k + 1)];
                        if notlast {
                            p += z * v[(i, k + 2)];
                            v[(i, k + 2)] -= p * r;
                        }
                        v[(i, k)] -= p;
                        v[(i, k + 1)] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }
    // leftover bulge entries from the last sweeps
    for i in 0..nn {
        for j in 0..i.saturating_sub(1) {
            h[(i, j)] = 0.0;
        }
    }
    Ok(())
}
