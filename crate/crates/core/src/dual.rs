//! Forward-mode dual numbers with a fixed number of tangents.
//!
//! Used for the boundary gradients, where a crossing parameter is a
//! small closed-form function of the nine vertex coordinates.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub const fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    /// Independent variable with unit tangent in slot `k`.
    pub fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; N];
        d[k] = 1.0;
        Self { v, d }
    }

    pub fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        let s = -inv * inv;
        Self { v: inv, d: self.d.map(|x| x * s) }
    }

    pub fn scale(self, s: f64) -> Self {
        Self { v: self.v * s, d: self.d.map(|x| x * s) }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { v: self.v + o.v, d: std::array::from_fn(|k| self.d[k] + o.d[k]) }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { v: self.v - o.v, d: std::array::from_fn(|k| self.d[k] - o.d[k]) }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self { v: self.v * o.v, d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]) }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        Self { v: self.v + o, d: self.d }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        Self { v: self.v - o, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        self.scale(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_rule() {
        let x = Dual::<2>::var(3.0, 0);
        let y = Dual::<2>::var(2.0, 1);
        let f = (x * x + y) / (x - y * 0.5);
        // f = (x^2 + y) / (x - y/2)
        let (xv, yv) = (3.0, 2.0);
        let den: f64 = xv - yv / 2.0;
        let dfdx = (2.0 * xv * den - (xv * xv + yv)) / (den * den);
        let dfdy = (den + 0.5 * (xv * xv + yv)) / (den * den);
        assert!((f.v - 5.5).abs() < 1e-15);
        assert!((f.d[0] - dfdx).abs() < 1e-14);
        assert!((f.d[1] - dfdy).abs() < 1e-14);
    }
}
