use serde::{Deserialize, Serialize};

use crate::error::{BctError, Result};
use crate::formats::clip_round;
use crate::quantizer::ClipBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LutFunc {
    Gelu,
    Exp,
    Sqrt,
}

impl LutFunc {
    pub fn id(self) -> u8 {
        match self {
            LutFunc::Gelu => 0,
            LutFunc::Exp => 1,
            LutFunc::Sqrt => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(LutFunc::Gelu),
            1 => Some(LutFunc::Exp),
            2 => Some(LutFunc::Sqrt),
            _ => None,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            LutFunc::Gelu => gelu_f64(x),
            LutFunc::Exp => x.exp(),
            LutFunc::Sqrt => x.max(0.0).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LutFunc::Gelu => "gelu",
            LutFunc::Exp => "exp",
            LutFunc::Sqrt => "sqrt",
        }
    }
}

/// `x * (1 + erf(x / sqrt 2)) / 2`.
pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// 256 key/value pairs: key `c` (an int8 code) stands for `c * 2^-in_shift`,
/// its value is the int8 encoding of `f(key)` at `out_shift`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lut256 {
    pub func: LutFunc,
    pub in_shift: i32,
    /// Sampling range in key codes.
    pub clip: ClipBounds,
    pub out_shift: i32,
    /// Indexed by `code + 128`.
    pub values: [i8; 256],
}

impl Lut256 {
    #[inline]
    pub fn value(&self, key: i32) -> i8 {
        self.values[(key + 128) as usize]
    }

    pub fn keys(&self) -> impl Iterator<Item = i8> {
        i8::MIN..=i8::MAX
    }

    pub fn key_value(&self, key: i32) -> f64 {
        key as f64 * 2f64.powi(-self.in_shift)
    }

    pub fn out_step(&self) -> f64 {
        2f64.powi(-self.out_shift)
    }

    /// Whether `x * 2^-x_shift` lies inside the sampling range.
    pub fn in_range(&self, x: i64, x_shift: i32) -> bool {
        let d = self.in_shift - x_shift;
        let (v, lo, hi) = if d >= 0 {
            let v = if d >= 64 { (x.signum() as i128) << 100 } else { (x as i128) << d };
            (v, self.clip.min as i128, self.clip.max as i128)
        } else {
            let n = (-d).min(64) as u32;
            (x as i128, (self.clip.min as i128) << n, (self.clip.max as i128) << n)
        };
        v >= lo && v <= hi
    }
}

/// Builds the table by evaluating `f` in f64 at every key.
pub fn build_lut(func: LutFunc, in_shift: i32, clip: ClipBounds, out_shift: i32) -> Result<Lut256> {
    if clip.min >= clip.max || clip.min < -128 || clip.max > 127 {
        return Err(BctError::InvalidCalibration(format!(
            "degenerate sampling range [{}, {}]",
            clip.min, clip.max
        )));
    }
    let mut values = [0i8; 256];
    for (i, v) in values.iter_mut().enumerate() {
        let key = i as i32 - 128;
        let y = func.eval(key as f64 * 2f64.powi(-in_shift));
        *v = clip_round(y * 2f64.powi(out_shift), -128, 127) as i8;
    }
    Ok(Lut256 { func, in_shift, clip, out_shift, values })
}

/// Interpolated table output for `x * 2^-x_shift`, as an integer at shift
/// `out_shift + frac`. Inputs beyond the sampling range saturate to the
/// boundary value.
pub(crate) fn interp_fixed(lut: &Lut256, x: i64, x_shift: i32, frac: u32) -> i64 {
    let lo = lut.clip.min as i64;
    let hi = lut.clip.max as i64;
    let diff = lut.in_shift - x_shift;
    let (key0, rem, den_bits) = if diff >= 0 {
        // x sits exactly on a key (or beyond the table)
        let u = if diff >= 40 {
            if x > 0 {
                hi + 1
            } else if x < 0 {
                lo - 1
            } else {
                0
            }
        } else {
            x.saturating_mul(1i64 << diff)
        };
        (u, 0i64, 0u32)
    } else {
        let (x, n) = if -diff > 40 {
            (crate::fixed::rne_shr(x, (-diff - 40) as u32), 40u32)
        } else {
            (x, (-diff) as u32)
        };
        let k = x >> n;
        (k, x - (k << n), n)
    };
    if key0 < lo {
        return (lut.value(lo as i32) as i64) << frac;
    }
    if key0 > hi || (key0 == hi && rem > 0) {
        return (lut.value(hi as i32) as i64) << frac;
    }
    let v0 = lut.value(key0 as i32) as i64;
    if rem == 0 {
        return v0 << frac;
    }
    let v1 = lut.value(key0 as i32 + 1) as i64;
    // (v0 * (D - rem) + v1 * rem) / D with D = 2^den_bits
    let num = (v0 as i128) * (1i128 << den_bits) + ((v1 - v0) as i128) * rem as i128;
    let shifted = if frac >= den_bits {
        num << (frac - den_bits)
    } else {
        crate::fixed::rne_shr_i128(num, den_bits - frac)
    };
    shifted as i64
}

/// Interpolated lookup re-encoded as an int8 code at the table's output shift.
pub fn lookup_interp(lut: &Lut256, x: i64, x_shift: i32) -> i8 {
    interp_fixed(lut, x, x_shift, 0).clamp(-128, 127) as i8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        // values from tables of the error function
        assert!((libm::erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-13);
        assert!((libm::erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-13);
        assert!((libm::erf(2.0) - 0.995_322_265_018_952_7).abs() < 1e-13);
        assert!((libm::erf(3.0) - 0.999_977_909_503_001_4).abs() < 1e-13);
        assert!((libm::erf(-1.5) + 0.966_105_146_475_310_7).abs() < 1e-13);
        assert_eq!(libm::erf(0.0), 0.0);
    }

    #[test]
    fn degenerate_range_is_rejected() {
        let err = build_lut(LutFunc::Gelu, 5, ClipBounds { min: 3, max: 3 }, 5).unwrap_err();
        assert!(matches!(err, BctError::InvalidCalibration(_)));
    }

    #[test]
    fn values_follow_constructive_definition() {
        let lut = build_lut(LutFunc::Gelu, 5, ClipBounds { min: -128, max: 127 }, 5).unwrap();
        for key in -128..=127 {
            let want = clip_round(gelu_f64(key as f64 / 32.0) * 32.0, -128, 127);
            assert_eq!(lut.value(key) as i32, want);
        }
        assert_eq!(lut.value(0), 0);
    }

    #[test]
    fn interpolation_hits_keys_and_midpoints() {
        let lut = build_lut(LutFunc::Sqrt, 6, ClipBounds { min: 32, max: 127 }, 6).unwrap();
        assert_eq!(lookup_interp(&lut, 64, 6), lut.value(64));
        assert_eq!(lookup_interp(&lut, 64, 6), 64);
        // midpoint of keys 40 and 41: input 81 at shift 7
        let (a, b) = (lut.value(40) as i64, lut.value(41) as i64);
        let mid = crate::fixed::rne_shr(a + b, 1);
        assert_eq!(lookup_interp(&lut, 81, 7) as i64, mid);
        // coarser input lands on keys exactly
        assert_eq!(lookup_interp(&lut, 16, 4), lut.value(64));
    }

    #[test]
    fn saturates_outside_sampling_range() {
        let lut = build_lut(LutFunc::Gelu, 5, ClipBounds { min: -128, max: 127 }, 5).unwrap();
        assert_eq!(lookup_interp(&lut, 1000, 5), lut.value(127));
        assert_eq!(lookup_interp(&lut, -1000, 5), lut.value(-128));
        assert_eq!(lookup_interp(&lut, 100, 1), lut.value(127));
    }
}
