//! Second-order forward-mode automatic differentiation.
//!
//! A [`Jet`] carries a value together with its gradient and Hessian with
//! respect to `N` seeded variables. Arithmetic propagates both orders by the
//! chain rule, so evaluating a function once on seeded jets yields its full
//! gradient and Hessian. Problem code is written once against [`Scalar`] and
//! runs on plain `f64` for values and on jets for derivatives.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Numeric type that problem definitions are written against.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn constant(value: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn constant(value: f64) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Value, gradient and Hessian of a scalar function of `N` variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const N: usize> {
    pub value: f64,
    pub grad: [f64; N],
    pub hess: [[f64; N]; N],
}

impl<const N: usize> Jet<N> {
    pub fn constant(value: f64) -> Self {
        Jet {
            value,
            grad: [0.0; N],
            hess: [[0.0; N]; N],
        }
    }

    /// Independent variable `index` taking `value`.
    pub fn variable(value: f64, index: usize) -> Self {
        let mut j = Self::constant(value);
        j.grad[index] = 1.0;
        j
    }

    /// Seeds a full vector of independent variables.
    pub fn seed(values: &[f64; N]) -> [Self; N] {
        std::array::from_fn(|i| Self::variable(values[i], i))
    }

    /// Applies a scalar function given its value and first two derivatives
    /// at `self.value`.
    fn chain(self, f0: f64, f1: f64, f2: f64) -> Self {
        let mut out = Self::constant(f0);
        for i in 0..N {
            out.grad[i] = f1 * self.grad[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.hess[i][j] = f1 * self.hess[i][j] + f2 * self.grad[i] * self.grad[j];
            }
        }
        out
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<const N: usize> AddAssign for Jet<N> {
    fn add_assign(&mut self, rhs: Self) {
        self.value += rhs.value;
        for i in 0..N {
            self.grad[i] += rhs.grad[i];
            for j in 0..N {
                self.hess[i][j] += rhs.hess[i][j];
            }
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl<const N: usize> SubAssign for Jet<N> {
    fn sub_assign(&mut self, rhs: Self) {
        self.value -= rhs.value;
        for i in 0..N {
            self.grad[i] -= rhs.grad[i];
            for j in 0..N {
                self.hess[i][j] -= rhs.hess[i][j];
            }
        }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self, rhs);
        let mut out = Self::constant(a.value * b.value);
        for i in 0..N {
            out.grad[i] = a.grad[i] * b.value + a.value * b.grad[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.hess[i][j] = a.hess[i][j] * b.value
                    + a.value * b.hess[i][j]
                    + a.grad[i] * b.grad[j]
                    + a.grad[j] * b.grad[i];
            }
        }
        out
    }
}

impl<const N: usize> MulAssign for Jet<N> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let v = rhs.value;
        self * rhs.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v))
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Add<f64> for Jet<N> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Jet<N> {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Jet<N> {
    type Output = Self;
    fn mul(mut self, rhs: f64) -> Self {
        self.value *= rhs;
        for i in 0..N {
            self.grad[i] *= rhs;
            for j in 0..N {
                self.hess[i][j] *= rhs;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for Jet<N> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> Scalar for Jet<N> {
    fn constant(value: f64) -> Self {
        Jet::constant(value)
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(c, -s, -c)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }
    fn ln(self) -> Self {
        let v = self.value;
        self.chain(v.ln(), 1.0 / v, -1.0 / (v * v))
    }
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.chain(r, 0.5 / r, -0.25 / (r * self.value))
    }
    fn powi(self, n: i32) -> Self {
        let v = self.value;
        let nf = f64::from(n);
        let d1 = if n == 0 { 0.0 } else { nf * v.powi(n - 1) };
        let d2 = if n == 0 || n == 1 {
            0.0
        } else {
            nf * (nf - 1.0) * v.powi(n - 2)
        };
        self.chain(v.powi(n), d1, d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_second(f: impl Fn(f64, f64) -> f64, x: f64, y: f64, h: f64) -> [[f64; 2]; 2] {
        let fxx = (f(x + h, y) - 2.0 * f(x, y) + f(x - h, y)) / (h * h);
        let fyy = (f(x, y + h) - 2.0 * f(x, y) + f(x, y - h)) / (h * h);
        let fxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h))
            / (4.0 * h * h);
        [[fxx, fxy], [fxy, fyy]]
    }

    fn sample<S: Scalar>(x: S, y: S) -> S {
        (x * y).sin() + x.exp() / (y + 2.0) + (x.square() + 1.0).sqrt() * y.ln() + x.powi(3)
    }

    #[test]
    fn product_rule_matches_hand_derivatives() {
        let [x, y] = Jet::<2>::seed(&[1.5, -0.5]);
        let p = x * y;
        assert_eq!(p.value, -0.75);
        assert_eq!(p.grad, [-0.5, 1.5]);
        assert_eq!(p.hess, [[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let (x0, y0) = (0.3, 1.7);
        let [x, y] = Jet::<2>::seed(&[x0, y0]);
        let j = sample(x, y);
        let f = |a: f64, b: f64| sample(a, b);
        assert!((j.value - f(x0, y0)).abs() < 1e-14);
        let h = 1e-6;
        let gx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let gy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((j.grad[0] - gx).abs() < 1e-8);
        assert!((j.grad[1] - gy).abs() < 1e-8);
        let fd = central_second(f, x0, y0, 1e-4);
        for i in 0..2 {
            for k in 0..2 {
                assert!((j.hess[i][k] - fd[i][k]).abs() < 1e-5, "{i}{k}");
                assert_eq!(j.hess[i][k], j.hess[k][i]);
            }
        }
    }

    #[test]
    fn division_and_powers() {
        let [x] = Jet::<1>::seed(&[2.0]);
        let q = Jet::constant(1.0) / x;
        assert!((q.grad[0] + 0.25).abs() < 1e-15);
        assert!((q.hess[0][0] - 0.25).abs() < 1e-15);
        let c = x.powi(3);
        assert_eq!(c.value, 8.0);
        assert_eq!(c.grad[0], 12.0);
        assert_eq!(c.hess[0][0], 12.0);
        let z = x.powi(0);
        assert_eq!(z.grad[0], 0.0);
    }
}
