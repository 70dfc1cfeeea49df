//! Scalar abstraction over `f32`/`f64`.
//!
//! The model runs at `f32` by default; every gradient check runs the same
//! code at `f64` so that finite-difference error is not drowned by rounding.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Tensor dtype tag as stored in the "UFT1" binary format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: f32) -> f32 {
        f32::max(self, other)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: f64) -> f64 {
        f64::max(self, other)
    }
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    fn from_le_slice(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Error function (correctly rounded to ~1 ulp). `std` has no erf; the GELU
/// derivative checks need the forward and backward paths to agree far below
/// the 1e-4 gradient tolerance, so a low-accuracy polynomial fit would not
/// do. The series/continued-fraction reference below cross-checks it.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Slow reference erf: Maclaurin series below |x| = 2, Laplace continued
/// fraction (modified Lentz) for erfc above. Used to verify [`erf`].
pub fn erf_reference(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax < 1e-300 {
        return FRAC_2_SQRT_PI * x;
    }
    if ax >= 6.5 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    if ax <= 2.0 {
        // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 1.0;
        loop {
            term *= -x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs() {
                break;
            }
            n += 1.0;
        }
        FRAC_2_SQRT_PI * sum
    } else {
        let e = 1.0 - erfc_cf(ax);
        if x > 0.0 {
            e
        } else {
            -e
        }
    }
}

/// erfc via the Laplace continued fraction (modified Lentz), valid x >= 2:
/// sqrt(pi) e^{x^2} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..200 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        // Values from standard tables.
        assert!((erf(0.0)).abs() < 1e-17);
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-14);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-14);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-14);
        assert!((erf(3.0) - 0.9999779095030014).abs() < 1e-14);
        assert!((erf(-1.0) + 0.8427007929497149).abs() < 1e-14);
        assert_eq!(erf(10.0), 1.0);
    }

    #[test]
    fn erf_is_smooth_across_branch_switch() {
        // The series/continued-fraction handoff at |x| = 2 must be seamless.
        let below = erf_reference(2.0 - 1e-9);
        let above = erf_reference(2.0 + 1e-9);
        assert!((above - below).abs() < 1e-9);
    }

    #[test]
    fn fast_erf_agrees_with_the_series_reference() {
        let mut x = -6.0;
        while x <= 6.0 {
            let fast = erf(x);
            let slow = erf_reference(x);
            assert!(
                (fast - slow).abs() <= 1e-14 * slow.abs().max(1e-300) + 1e-16,
                "x={x}: {fast} vs {slow}"
            );
            x += 0.0137;
        }
    }

    #[test]
    fn gelu_anchors() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        // gelu(1) = 1 * Phi(1)
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_grad(x) - fd).abs() < 1e-8,
                "x={x}: analytic {} vs fd {}",
                gelu_grad(x),
                fd
            );
        }
    }
}
