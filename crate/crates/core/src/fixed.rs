//! Integer helpers shared by the low-bit arithmetic: round-half-even shifts,
//! power-of-two shift selection and exponent alignment.

/// Shifts are stored as `i8`; every computed shift is clamped to this range.
pub const SHIFT_MIN: i32 = -127;
pub const SHIFT_MAX: i32 = 127;

#[inline]
pub fn clamp_shift(s: i32) -> i32 {
    s.clamp(SHIFT_MIN, SHIFT_MAX)
}

/// `v / 2^n` rounded half to even.
#[inline]
pub fn rne_shr_i128(v: i128, n: u32) -> i128 {
    if n == 0 {
        return v;
    }
    if n >= 127 {
        // |v| < 2^127 = 2 * 2^126 and the half-way point is 2^(n-1) >= 2^126.
        let half = 1i128 << 126;
        let mag = v.unsigned_abs();
        return if n == 127 && mag > half as u128 { v.signum() } else { 0 };
    }
    let floor = v >> n;
    let rem = v - (floor << n);
    let half = 1i128 << (n - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

#[inline]
pub fn rne_shr(v: i64, n: u32) -> i64 {
    if n == 0 {
        return v;
    }
    if n >= 63 {
        return rne_shr_i128(v as i128, n) as i64;
    }
    let floor = v >> n;
    let rem = (v as u64) & ((1u64 << n) - 1);
    let half = 1u64 << (n - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Multiplies by `2^delta`: a left shift for `delta >= 0`, otherwise a
/// round-half-even right shift. Left shifts saturate at the `i64` range.
#[inline]
pub fn shift_by(v: i64, delta: i32) -> i64 {
    if delta >= 0 {
        let d = delta as u32;
        if v == 0 {
            0
        } else if d >= 63 || v.unsigned_abs().leading_zeros() <= d {
            if v > 0 {
                i64::MAX
            } else {
                i64::MIN
            }
        } else {
            v << d
        }
    } else {
        rne_shr(v, delta.unsigned_abs())
    }
}

/// `v / d` rounded half to even (`d > 0`).
#[inline]
pub fn rne_div(v: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    let q = v.div_euclid(d);
    let r = v.rem_euclid(d);
    let twice = 2 * r as i128;
    let d = d as i128;
    if twice > d || (twice == d && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Number of significant bits of `|v|` (0 for 0).
#[inline]
pub fn bit_len(v: u128) -> u32 {
    128 - v.leading_zeros()
}

/// `floor(log2(2^(k-1) / m))` for a positive integer magnitude `m`.
#[inline]
pub fn shift_for_int_max(m: u128, k: u32) -> i32 {
    debug_assert!(m > 0);
    let floor_log2 = bit_len(m) as i32 - 1;
    let pow2 = m.is_power_of_two();
    (k as i32 - 1) - floor_log2 - if pow2 { 0 } else { 1 }
}

/// `floor(log2(2^(k-1) / m))` for a positive finite real `m`, evaluated exactly
/// from the binary representation (no `log2` rounding).
pub fn shift_for_real_max(m: f64, k: u32) -> i32 {
    debug_assert!(m > 0.0 && m.is_finite());
    let (floor_log2, pow2) = decompose_f64(m);
    (k as i32 - 1) - floor_log2 - if pow2 { 0 } else { 1 }
}

/// Returns `(floor(log2 m), m is an exact power of two)` for positive finite `m`.
pub fn decompose_f64(m: f64) -> (i32, bool) {
    let bits = m.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        // subnormal: value = mant * 2^-1074
        let fl = 63 - mant.leading_zeros() as i32;
        (fl - 1074, mant.is_power_of_two())
    } else {
        (exp - 1023, mant == 0)
    }
}

/// Brings `(value, shift)` pairs (value * 2^-shift) onto one common shift.
///
/// The target is the largest shift among non-zero entries, lowered as far as
/// needed so that every aligned magnitude stays below `2^limit_bits`. Entries
/// whose shift exceeds the target are right-shifted with round-half-even.
pub fn align_common(items: &[(i64, i32)], limit_bits: u32) -> (Vec<i64>, i32) {
    let Some(mut target) = items.iter().filter(|(v, _)| *v != 0).map(|&(_, s)| s).max() else {
        return (vec![0; items.len()], 0);
    };
    for &(v, s) in items {
        if v != 0 {
            let room = s + limit_bits as i32 - bit_len(v.unsigned_abs() as u128) as i32;
            target = target.min(room);
        }
    }
    let values = items
        .iter()
        .map(|&(v, s)| if v == 0 { 0 } else { shift_by(v, target - s) })
        .collect();
    (values, target)
}

/// Round-half-even re-encoding of integer values at `value_shift` into `k`-bit
/// codes with a fresh power-of-two shift chosen from the block maximum.
///
/// Equivalent, bit for bit, to dequantizing the values and quantizing them
/// again; shifts are clamped to the `i8` range.
pub fn requantize_fixed(
    values: &[i64],
    value_shift: i32,
    k: u32,
    clip_min: i32,
    clip_max: i32,
) -> (Vec<i8>, i32) {
    let max_abs = values.iter().map(|v| v.unsigned_abs() as u128).max().unwrap_or(0);
    if max_abs == 0 {
        return (vec![0; values.len()], 0);
    }
    let new_shift = clamp_shift(value_shift + shift_for_int_max(max_abs, k));
    let delta = new_shift - value_shift;
    let codes = values
        .iter()
        .map(|&v| if v == 0 { 0 } else { shift_by(v, delta).clamp(clip_min as i64, clip_max as i64) as i8 })
        .collect();
    (codes, new_shift)
}
