use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Activation element type. Parameters are always plain `f64`; activations
/// may carry a tangent (see [`Dual`]) so that a reverse pass run on dual
/// inputs yields directional derivatives of the parameter gradient.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + Send
    + Sync
    + 'static
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn scale(self, c: f64) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    #[inline]
    fn mul_add_f64(self, c: f64, acc: Self) -> Self {
        acc + self.scale(c)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// First-order dual number `re + eps·ε` with ε² = 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.eps -= o.eps;
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re * c, self.eps * c)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: S) -> S {
        (x * x + S::cst(1.0)).tanh() / (x.exp() + S::cst(2.0)) - x.scale(3.0)
    }

    #[test]
    fn dual_derivative_matches_central_difference() {
        for &x in &[-1.3, -0.2, 0.0, 0.7, 2.1] {
            let d = f(Dual::new(x, 1.0));
            let h = 1e-6;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((d.re - f(x)).abs() < 1e-15);
            assert!((d.eps - fd).abs() < 1e-8, "{x}: {} vs {fd}", d.eps);
        }
    }
}
