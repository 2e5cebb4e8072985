//! Element codecs: saturating int4/int8 and software fp8 (e4m3, e5m2).
//!
//! Both fp8 formats reserve the all-ones exponent; there are no Inf/NaN
//! encodings, which bounds e4m3 at +-240 and e5m2 at +-57344.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, BctError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Codec {
    Int4,
    Int8,
    Fp8E4M3,
    Fp8E5M2,
    Fp32,
}

impl Codec {
    pub const ALL: [Codec; 5] = [Codec::Int4, Codec::Int8, Codec::Fp8E4M3, Codec::Fp8E5M2, Codec::Fp32];

    /// Wire id used by the container format.
    pub fn id(self) -> u8 {
        match self {
            Codec::Int4 => 0,
            Codec::Int8 => 1,
            Codec::Fp8E4M3 => 2,
            Codec::Fp8E5M2 => 3,
            Codec::Fp32 => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Codec> {
        Codec::ALL.into_iter().find(|c| c.id() == id)
    }

    pub fn bit_width(self) -> u32 {
        match self {
            Codec::Int4 => 4,
            Codec::Int8 | Codec::Fp8E4M3 | Codec::Fp8E5M2 => 8,
            Codec::Fp32 => 32,
        }
    }

    pub fn is_int(self) -> bool {
        matches!(self, Codec::Int4 | Codec::Int8)
    }

    pub fn is_fp8(self) -> bool {
        matches!(self, Codec::Fp8E4M3 | Codec::Fp8E5M2)
    }

    pub fn fp8_format(self) -> Option<Fp8Format> {
        match self {
            Codec::Fp8E4M3 => Some(Fp8Format::E4M3),
            Codec::Fp8E5M2 => Some(Fp8Format::E5M2),
            _ => None,
        }
    }

    /// Integer code range; `None` for floating codecs.
    pub fn int_range(self) -> Option<(i32, i32)> {
        match self {
            Codec::Int4 => Some((-8, 7)),
            Codec::Int8 => Some((-128, 127)),
            _ => None,
        }
    }

    pub fn dynamic_min(self) -> f64 {
        -self.dynamic_max() - if self.is_int() { 1.0 } else { 0.0 }
    }

    pub fn dynamic_max(self) -> f64 {
        match self {
            Codec::Int4 => 7.0,
            Codec::Int8 => 127.0,
            Codec::Fp8E4M3 => Fp8Format::E4M3.max_finite(),
            Codec::Fp8E5M2 => Fp8Format::E5M2.max_finite(),
            Codec::Fp32 => f32::MAX as f64,
        }
    }

    pub fn min_positive(self) -> f64 {
        match self {
            Codec::Int4 | Codec::Int8 => 1.0,
            Codec::Fp8E4M3 => Fp8Format::E4M3.min_subnormal(),
            Codec::Fp8E5M2 => Fp8Format::E5M2.min_subnormal(),
            Codec::Fp32 => f32::from_bits(1) as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Codec::Int4 => "int4",
            Codec::Int8 => "int8",
            Codec::Fp8E4M3 => "fp8_e4m3",
            Codec::Fp8E5M2 => "fp8_e5m2",
            Codec::Fp32 => "fp32",
        }
    }
}

impl std::fmt::Display for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `clip(round_half_even(value), MIN, MAX)` for an integer codec.
pub fn encode_int<T: Scalar>(value: T, codec: Codec) -> Result<i32> {
    let (lo, hi) = codec
        .int_range()
        .ok_or_else(|| invalid_arg(format!("{codec} is not an integer codec")))?;
    Ok(clip_round(value.as_f64(), lo, hi))
}

#[inline]
pub(crate) fn clip_round(v: f64, lo: i32, hi: i32) -> i32 {
    let r = v.round_ties_even();
    if r <= lo as f64 {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as i32
    }
}

/// Layout of a software fp8 format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fp8Format {
    pub exp_bits: u32,
    pub man_bits: u32,
    pub bias: i32,
}

impl Fp8Format {
    pub const E4M3: Fp8Format = Fp8Format { exp_bits: 4, man_bits: 3, bias: 7 };
    pub const E5M2: Fp8Format = Fp8Format { exp_bits: 5, man_bits: 2, bias: 15 };

    pub fn codec(self) -> Codec {
        if self == Self::E4M3 {
            Codec::Fp8E4M3
        } else {
            Codec::Fp8E5M2
        }
    }

    fn max_exp_field(self) -> u32 {
        (1 << self.exp_bits) - 2
    }

    /// Largest finite magnitude code (sign bit clear).
    pub fn max_code(self) -> u8 {
        ((self.max_exp_field() << self.man_bits) | ((1 << self.man_bits) - 1)) as u8
    }

    pub fn max_finite(self) -> f64 {
        self.decode_magnitude(self.max_code() as u32)
    }

    pub fn min_subnormal(self) -> f64 {
        pow2(1 - self.bias - self.man_bits as i32)
    }

    pub fn min_normal(self) -> f64 {
        pow2(1 - self.bias)
    }

    /// Whether `code` uses the reserved all-ones exponent.
    pub fn is_reserved(self, code: u8) -> bool {
        ((code as u32 & 0x7f) >> self.man_bits) == (1 << self.exp_bits) - 1
    }

    fn decode_magnitude(self, mag: u32) -> f64 {
        let exp = (mag >> self.man_bits) as i32;
        let mant = mag & ((1 << self.man_bits) - 1);
        if exp == 0 {
            mant as f64 * self.min_subnormal()
        } else {
            ((1u32 << self.man_bits) + mant) as f64 * pow2(exp - self.bias - self.man_bits as i32)
        }
    }

    /// Round-half-even conversion; saturates at the finite maximum and keeps
    /// the sign of zero.
    pub fn encode(self, value: f32) -> u8 {
        let sign = if value.is_sign_negative() { 0x80u8 } else { 0 };
        let a = (value as f64).abs();
        if a.is_nan() {
            return sign;
        }
        if a >= self.max_finite() {
            return sign | self.max_code();
        }
        if a == 0.0 {
            return sign;
        }
        let quantum = if a < self.min_normal() {
            self.min_subnormal()
        } else {
            let (floor_log2, _) = crate::fixed::decompose_f64(a);
            pow2(floor_log2 - self.man_bits as i32)
        };
        let n = (a / quantum).round_ties_even() as u32;
        let bits = if a < self.min_normal() {
            n
        } else {
            let (floor_log2, _) = crate::fixed::decompose_f64(a);
            (((floor_log2 + self.bias) as u32) << self.man_bits) + (n - (1 << self.man_bits))
        };
        sign | bits.min(self.max_code() as u32) as u8
    }

    /// Exact value of a finite code; reserved codes are an error.
    pub fn try_decode(self, code: u8) -> Result<f32> {
        if self.is_reserved(code) {
            return Err(BctError::InvalidInput(format!(
                "fp8 code {code:#04x} uses the reserved exponent"
            )));
        }
        Ok(self.decode(code))
    }

    /// Exact value of `code`. Reserved codes decode to the saturated maximum.
    pub fn decode(self, code: u8) -> f32 {
        let mag = if self.is_reserved(code) { self.max_code() as u32 } else { code as u32 & 0x7f };
        let v = self.decode_magnitude(mag) as f32;
        if code & 0x80 != 0 {
            -v
        } else {
            v
        }
    }

    /// Spacing of representable values around `v` (within the finite range).
    pub fn ulp(self, v: f64) -> f64 {
        let a = v.abs();
        if a < self.min_normal() {
            self.min_subnormal()
        } else {
            let (floor_log2, _) = crate::fixed::decompose_f64(a);
            pow2(floor_log2.min(self.max_exp_field() as i32 - self.bias) - self.man_bits as i32)
        }
    }
}

#[inline]
pub(crate) fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

pub fn fp32_to_fp8(value: f32, codec: Codec) -> Result<u8> {
    codec
        .fp8_format()
        .map(|f| f.encode(value))
        .ok_or_else(|| invalid_arg(format!("{codec} is not an fp8 codec")))
}

pub fn fp8_to_fp32(code: u8, codec: Codec) -> Result<f32> {
    codec
        .fp8_format()
        .ok_or_else(|| invalid_arg(format!("{codec} is not an fp8 codec")))?
        .try_decode(code)
}

/// Tensor of fp8 codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fp8Tensor {
    pub shape: Vec<usize>,
    pub format: Fp8Format,
    pub codes: Vec<u8>,
}

impl Fp8Tensor {
    pub fn encode<T: Scalar>(t: &Tensor<T>, format: Fp8Format) -> Self {
        Self {
            shape: t.shape().to_vec(),
            format,
            codes: t.data().iter().map(|v| format.encode(v.as_f64() as f32)).collect(),
        }
    }

    pub fn decode(&self) -> Tensor<f32> {
        let table: Vec<f32> = (0..=255u8).map(|c| self.format.decode(c)).collect();
        let data = self.codes.iter().map(|&c| table[c as usize]).collect();
        Tensor::new(self.shape.clone(), data).expect("fp8 decode yields finite values")
    }

    pub fn codec(&self) -> Codec {
        self.format.codec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn int_encoding_rounds_and_saturates() {
        assert_eq!(encode_int(127.4f32, Codec::Int8).unwrap(), 127);
        assert_eq!(encode_int(200.0f32, Codec::Int8).unwrap(), 127);
        assert_eq!(encode_int(-8.7f32, Codec::Int4).unwrap(), -8);
        assert_eq!(encode_int(2.5f32, Codec::Int8).unwrap(), 2);
        assert_eq!(encode_int(-3.5f64, Codec::Int8).unwrap(), -4);
        assert!(encode_int(1.0f32, Codec::Fp8E4M3).is_err());
    }

    #[test]
    fn table_ranges() {
        assert_eq!(Codec::Int4.dynamic_min(), -8.0);
        assert_eq!(Codec::Int8.dynamic_max(), 127.0);
        assert_eq!(Codec::Fp8E4M3.dynamic_max(), 240.0);
        assert_eq!(Codec::Fp8E5M2.dynamic_max(), 57344.0);
        assert_eq!(Codec::Fp8E4M3.min_positive(), 2f64.powi(-9));
        assert_eq!(Codec::Fp8E5M2.min_positive(), 2f64.powi(-16));
        assert_eq!(Codec::Fp32.min_positive(), f32::from_bits(1) as f64);
    }

    #[test]
    fn fp8_examples() {
        let e4 = Fp8Format::E4M3;
        assert_eq!(e4.decode(e4.encode(240.0)), 240.0);
        assert_eq!(e4.encode(1000.0), e4.encode(240.0));
        assert_eq!(e4.encode(-1000.0), 0x80 | e4.max_code());
        let e5 = Fp8Format::E5M2;
        let one = e5.encode(1.0);
        assert_eq!(e5.decode(one), 1.0);
        assert_eq!(e5.decode(e5.max_code()), 57344.0);
        assert_eq!(e4.decode(0), 0.0);
    }

    #[test]
    fn tiny_values_round_to_nearest_subnormal_or_zero() {
        let e4 = Fp8Format::E4M3;
        let min = e4.min_subnormal() as f32;
        assert_eq!(e4.encode(min * 0.49), 0);
        assert_eq!(e4.encode(min * 0.5), 0); // tie to even
        assert_eq!(e4.encode(min * 0.51), 1);
        assert_eq!(e4.encode(min * 1.5), 2); // tie to even
        assert_eq!(e4.encode(-min * 0.2), 0x80);
    }

    #[test]
    fn reserved_codes_are_rejected() {
        assert!(fp8_to_fp32(0x78, Codec::Fp8E4M3).is_err());
        assert!(fp8_to_fp32(0xff, Codec::Fp8E4M3).is_err());
        assert!(fp8_to_fp32(0x7c, Codec::Fp8E5M2).is_err());
        assert!(fp8_to_fp32(0x77, Codec::Fp8E4M3).is_ok());
    }

    #[test]
    fn exhaustive_code_round_trip() {
        for format in [Fp8Format::E4M3, Fp8Format::E5M2] {
            for c in 0..=255u8 {
                if format.is_reserved(c) {
                    continue;
                }
                let v = format.decode(c);
                assert_eq!(format.encode(v), c, "{format:?} code {c:#04x}");
            }
        }
    }

    proptest! {
        #[test]
        fn int_encoding_never_leaves_range(v in proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO) {
            let a = encode_int(v, Codec::Int4).unwrap();
            let b = encode_int(v, Codec::Int8).unwrap();
            prop_assert!((-8..=7).contains(&a));
            prop_assert!((-128..=127).contains(&b));
        }

        #[test]
        fn fp8_error_is_at_most_half_ulp(v in -57344f32..57344f32, e4 in any::<bool>()) {
            let f = if e4 { Fp8Format::E4M3 } else { Fp8Format::E5M2 };
            let v = if e4 { v.clamp(-240.0, 240.0) } else { v };
            let back = f.decode(f.encode(v)) as f64;
            prop_assert!((back - v as f64).abs() <= f.ulp(v as f64) / 2.0);
        }
    }
}
