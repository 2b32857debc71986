//! Software IEEE 754 binary16.
//!
//! Values are carried as raw bits. Conversions from `f32` round to nearest,
//! ties to even. Arithmetic follows a one-rounding model: both operands are
//! widened exactly to `f32`, the operation runs in `f32`, and the result is
//! rounded once back to binary16. Because binary32 carries more than twice
//! the binary16 precision plus two bits, that double rounding is equivalent
//! to a correctly rounded binary16 operation for `+ - * /`.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MAN_MASK: u16 = 0x03FF;

/// A binary16 value stored as its bit pattern.
///
/// Equality is bitwise: `+0 != -0` and identical NaN patterns compare equal.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct F16(u16);

/// IEEE classification as needed by overflow detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F16Class {
    Finite,
    Infinite,
    Nan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl F16 {
    pub const ZERO: F16 = F16(0x0000);
    pub const NEG_ZERO: F16 = F16(0x8000);
    pub const ONE: F16 = F16(0x3C00);
    pub const INFINITY: F16 = F16(0x7C00);
    pub const NEG_INFINITY: F16 = F16(0xFC00);
    /// The canonical quiet NaN produced by every NaN-yielding operation.
    pub const NAN: F16 = F16(0x7E00);
    /// Largest finite value, 65504.
    pub const MAX: F16 = F16(0x7BFF);
    /// Smallest positive normal value, 2^-14.
    pub const MIN_POSITIVE: F16 = F16(0x0400);
    /// Smallest positive subnormal value, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: F16 = F16(0x0001);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        F16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Self {
        f32_to_f16(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f16_to_f32(self)
    }

    #[inline]
    pub fn classify(self) -> F16Class {
        f16_classify(self)
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MAN_MASK != 0
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    #[inline]
    pub fn is_subnormal(self) -> bool {
        self.0 & EXP_MASK == 0 && self.0 & MAN_MASK != 0
    }
}

/// Rounds an `f32` to the nearest binary16 value (ties to even).
///
/// Magnitudes at or above 65520 become infinity, magnitudes at or below
/// 2^-25 become zero, and every NaN becomes [`F16::NAN`].
#[inline]
pub fn f32_to_f16(x: f32) -> F16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        return if man != 0 {
            F16::NAN
        } else {
            F16(sign | EXP_MASK)
        };
    }

    // Rebias from 127 to 15.
    let e = exp - 112;
    if e >= 0x1F {
        return F16(sign | EXP_MASK);
    }

    if e <= 0 {
        // Result is subnormal or zero. Units of 2^-24.
        if e < -10 {
            return F16(sign);
        }
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut half = m >> shift;
        let rem = m & ((1 << shift) - 1);
        let halfway = 1 << (shift - 1);
        if rem > halfway || (rem == halfway && half & 1 == 1) {
            half += 1;
        }
        return F16(sign | half as u16);
    }

    let mut half = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && half & 1 == 1) {
        // A carry out of the mantissa correctly bumps the exponent, up to Inf.
        half += 1;
    }
    F16(sign | half as u16)
}

/// Exact widening of a binary16 value to `f32`.
#[inline]
pub fn f16_to_f32(h: F16) -> f32 {
    let bits = h.0;
    let sign = ((bits & SIGN_MASK) as u32) << 16;
    let exp = ((bits & EXP_MASK) >> 10) as u32;
    let man = (bits & MAN_MASK) as u32;

    match exp {
        0 => {
            // Zero or subnormal: man * 2^-24 is exact in f32.
            let mag = man as f32 * f32::from_bits(0x3380_0000);
            if sign != 0 {
                -mag
            } else {
                mag
            }
        }
        0x1F => {
            if man == 0 {
                f32::from_bits(sign | 0x7F80_0000)
            } else {
                f32::NAN
            }
        }
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

#[inline]
pub fn f16_classify(h: F16) -> F16Class {
    if h.is_nan() {
        F16Class::Nan
    } else if h.is_infinite() {
        F16Class::Infinite
    } else {
        F16Class::Finite
    }
}

#[inline]
pub fn f16_binop(op: BinOp, a: F16, b: F16) -> F16 {
    let (x, y) = (a.to_f32(), b.to_f32());
    let r = match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    f32_to_f16(r)
}

impl Add for F16 {
    type Output = F16;
    fn add(self, rhs: F16) -> F16 {
        f16_binop(BinOp::Add, self, rhs)
    }
}

impl Sub for F16 {
    type Output = F16;
    fn sub(self, rhs: F16) -> F16 {
        f16_binop(BinOp::Sub, self, rhs)
    }
}

impl Mul for F16 {
    type Output = F16;
    fn mul(self, rhs: F16) -> F16 {
        f16_binop(BinOp::Mul, self, rhs)
    }
}

impl Div for F16 {
    type Output = F16;
    fn div(self, rhs: F16) -> F16 {
        f16_binop(BinOp::Div, self, rhs)
    }
}

impl Neg for F16 {
    type Output = F16;
    fn neg(self) -> F16 {
        f32_to_f16(-self.to_f32())
    }
}

impl From<f32> for F16 {
    fn from(x: f32) -> Self {
        f32_to_f16(x)
    }
}

impl From<F16> for f32 {
    fn from(h: F16) -> Self {
        f16_to_f32(h)
    }
}

impl fmt::Debug for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F16({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for F16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn conversion_examples() {
        assert_eq!(f32_to_f16(1.0).to_bits(), 0x3C00);
        assert_eq!(f32_to_f16(0.0).to_bits(), 0x0000);
        assert_eq!(f32_to_f16(-0.0).to_bits(), 0x8000);
        assert_eq!(f32_to_f16(65520.0).to_bits(), 0x7C00);
        assert_eq!(f32_to_f16(-65520.0).to_bits(), 0xFC00);
        // Just below the overflow tie stays finite.
        assert_eq!(f32_to_f16(65519.996).to_bits(), 0x7BFF);
        assert_eq!(f32_to_f16(2f32.powi(-24)).to_bits(), 0x0001);
        assert_eq!(f32_to_f16(2f32.powi(-25)).to_bits(), 0x0000);
        assert_eq!(f32_to_f16(2f32.powi(-25) * 1.0001).to_bits(), 0x0001);
        assert_eq!(f32_to_f16(2f32.powi(-14)).to_bits(), 0x0400);
        assert!(f32_to_f16(f32::NAN).is_nan());
        assert_eq!(f32_to_f16(f32::INFINITY), F16::INFINITY);
    }

    #[test]
    fn widening_examples() {
        assert_eq!(f16_to_f32(F16::from_bits(0x3C00)), 1.0);
        assert_eq!(f16_to_f32(F16::from_bits(0x0000)), 0.0);
        assert_eq!(f16_to_f32(F16::from_bits(0x7BFF)), 65504.0);
        assert_eq!(f16_to_f32(F16::from_bits(0x0001)), 2f32.powi(-24));
        assert_eq!(f16_to_f32(F16::from_bits(0x8001)), -(2f32.powi(-24)));
        assert_eq!(f16_to_f32(F16::INFINITY), f32::INFINITY);
        assert!(f16_to_f32(F16::from_bits(0x7C01)).is_nan());
    }

    #[test]
    fn binop_examples() {
        let h = F16::from_f32;
        // ulp at 2048 is 2, so 2049 ties to the even neighbour 2048.
        assert_eq!(f16_binop(BinOp::Add, h(2048.0), h(1.0)), h(2048.0));
        assert_eq!(f16_binop(BinOp::Add, h(2048.0), h(3.0)), h(2052.0));
        assert_eq!(f16_binop(BinOp::Add, h(65504.0), h(65504.0)), F16::INFINITY);
        assert!(f16_binop(BinOp::Sub, F16::INFINITY, F16::INFINITY).is_nan());
        assert_eq!(f16_binop(BinOp::Div, h(1.0), h(0.0)), F16::INFINITY);
        assert_eq!(h(3.0) * h(0.5), h(1.5));
    }

    #[test]
    fn classify_examples() {
        assert_eq!(F16::from_bits(0x7C00).classify(), F16Class::Infinite);
        assert_eq!(F16::from_bits(0x7C01).classify(), F16Class::Nan);
        assert_eq!(F16::from_bits(0x0001).classify(), F16Class::Finite);
        assert_eq!(F16::from_bits(0xFC00).classify(), F16Class::Infinite);
    }

    #[test]
    fn mul_by_one_is_identity_on_finite_values() {
        for bits in 0..=u16::MAX {
            let x = F16::from_bits(bits);
            if x.is_finite() {
                assert_eq!(f16_binop(BinOp::Mul, F16::ONE, x), x, "{x:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn rounding_is_monotone(a in -70000f32..70000f32, b in -70000f32..70000f32) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(f32_to_f16(lo).to_f32() <= f32_to_f16(hi).to_f32());
        }

        #[test]
        fn relative_rounding_error_is_bounded_in_normal_range(
            mag in 2f32.powi(-14)..65504f32,
            neg in any::<bool>(),
        ) {
            let x = if neg { -mag } else { mag };
            let r = f32_to_f16(x).to_f32();
            prop_assert!((r - x).abs() <= 2f32.powi(-11) * x.abs());
        }
    }
}
