//! Scalar abstraction so the whole pipeline can run in f32 or f64.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type tag, used for checkpoint headers and precision checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    /// Single-byte tag used in serialized headers.
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0x20,
            Dtype::F64 => 0x40,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0x20 => Some(Dtype::F32),
            0x40 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Floating-point scalar the tape computes with.
///
/// Only the operations the pipeline actually needs are included; everything
/// has the obvious meaning from `f32`/`f64`. Conversions route through f64,
/// which is exact for every f32 value.
pub trait Real:
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
    + DivAssign
{
    const DTYPE: Dtype;
    /// Serialized width in bytes.
    const BYTE_WIDTH: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Append the little-endian byte representation.
    fn write_le(self, out: &mut Vec<u8>);
    /// Read one value from the start of `bytes` (must hold `BYTE_WIDTH` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn sin(self) -> Self {
        f32::sin(self)
    }
    fn cos(self) -> Self {
        f32::cos(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("read_le: short buffer"))
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
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
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("read_le: short buffer"))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) never overflows.
    x.maximum(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_matches_naive_form_in_safe_range() {
        for &x in &[-20.0, -3.0, -0.5, 0.0, 0.5, 3.0, 20.0] {
            let naive = 1.0 / (1.0 + (-x as f64).exp());
            assert_relative_eq!(sigmoid(x), naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!(sigmoid(-80.0f32).is_finite());
    }

    #[test]
    fn softplus_is_stable_and_positive() {
        assert_eq!(softplus(-800.0f64), 0.0);
        assert_relative_eq!(softplus(800.0f64), 800.0, max_relative = 1e-15);
        assert_relative_eq!(softplus(0.0f64), std::f64::consts::LN_2, max_relative = 1e-12);
        for &x in &[-5.0f64, -1.0, 0.0, 1.0, 5.0] {
            assert_relative_eq!(softplus(x), (1.0 + x.exp()).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn roundtrip_le_bytes() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[0..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..12]), -2.25);
    }
}
