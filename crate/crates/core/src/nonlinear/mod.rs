//! Nonlinear operators through 256-entry lookup tables.
//!
//! Inputs are int8 codes at a table-specific shift; the outputs are encoded
//! the same way. Between two keys the table is linearly interpolated in
//! integer arithmetic. Exp and sqrt extend their tables beyond the sampling
//! range through `e^(a+b) = e^a * e^b` and `sqrt(m * 4^t) = sqrt(m) * 2^t`.

mod lut;
mod ops;

pub use lut::{build_lut, gelu_f64, lookup_interp, Lut256, LutFunc};
pub use ops::{
    attention_scale, exp_with_decomposition, gelu, layer_norm, scaled_div, softmax,
    sqrt_with_decomposition, LayerNormOutput, SoftmaxOutput, DIV_FRAC_BITS,
};

use crate::quantizer::{compute_shift, ClipBounds};

/// Exp table for max-subtracted logits whose magnitude reaches `max_abs`.
///
/// The input shift follows the shift rule but is kept within `5..=7`, so the
/// sampling range `[-128 * 2^-s, 0]` spans between 1 and 4 units; anything
/// below goes through the product decomposition.
pub fn exp_lut_for_range(max_abs: f64) -> Lut256 {
    let s_in = if max_abs > 0.0 { compute_shift(max_abs, 8) } else { 7 }.clamp(5, 7);
    build_lut(LutFunc::Exp, s_in, ClipBounds { min: -128, max: 0 }, 7).expect("valid exp range")
}

/// GELU table whose keys cover `[-max_abs, max_abs]`.
pub fn gelu_lut_for_range(max_abs: f64) -> Lut256 {
    let s_in = if max_abs > 0.0 { compute_shift(max_abs, 8) } else { 7 };
    let peak = (-128..=127)
        .map(|c| gelu_f64(c as f64 * 2f64.powi(-s_in)).abs())
        .fold(0f64, f64::max);
    let s_out = compute_shift(peak, 8);
    build_lut(LutFunc::Gelu, s_in, ClipBounds { min: -128, max: 127 }, s_out).expect("valid gelu range")
}

/// Square-root table sampling `[0.5, 2)`; every other input is brought into
/// that range by powers of four.
pub fn sqrt_lut() -> Lut256 {
    build_lut(LutFunc::Sqrt, 6, ClipBounds { min: 32, max: 127 }, 6).expect("valid sqrt range")
}
