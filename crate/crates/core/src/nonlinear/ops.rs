use rayon::prelude::*;

use super::lut::{interp_fixed, lookup_interp, Lut256};
use crate::blockmm::OutputSpec;
use crate::error::{invalid_arg, Result};
use crate::fixed::{align_common, bit_len, rne_div, rne_shr_i128, shift_by};
use crate::quantizer::BlockQTensor;

/// Fractional bits of the scaled integer division.
pub const DIV_FRAC_BITS: u32 = 15;
/// Extra fractional bits kept on exp outputs inside softmax; keeps every
/// numerator below 2^16 so `numerator << 15` fits 32 bits.
const EXP_FRAC: u32 = 9;
/// Extra fractional bits kept on sqrt outputs inside LayerNorm.
const SQRT_FRAC: u32 = 8;
const GELU_FRAC: u32 = 8;
/// Decomposed products keep at most this many bits below the table step.
const EXP_EXTRA_LIMIT: i32 = 16;

/// `round_half_even((num << 15) / den)` in 32-bit integers.
///
/// Requires `|num| < 2^16` and `den > 0`.
pub fn scaled_div(num: i32, den: i32) -> Result<i32> {
    if den <= 0 {
        return Err(invalid_arg("scaled division needs a positive denominator"));
    }
    let n = num
        .checked_mul(1 << DIV_FRAC_BITS)
        .ok_or_else(|| invalid_arg(format!("numerator {num} does not leave 15 bits of headroom")))?;
    let q = n.div_euclid(den);
    let r = n.rem_euclid(den);
    let other = den - r;
    Ok(if r > other || (r == other && q & 1 == 1) { q + 1 } else { q })
}

/// `e^x` for `x = value * 2^-x_shift <= 0`, as `code * 2^-(out_shift + extra)`.
fn exp_fixed(lut: &Lut256, x: i64, x_shift: i32, frac: u32) -> (i64, i32) {
    if lut.in_range(x, x_shift) {
        return (interp_fixed(lut, x, x_shift, frac), frac as i32);
    }
    let cap = frac as i32 + EXP_EXTRA_LIMIT;
    if (x as f64) * 2f64.powi(-x_shift) < -64.0 {
        return (0, cap);
    }
    // integer grid fine enough for both the input and the table keys
    let s = x_shift.max(lut.in_shift);
    let big_x = (x as i128) << (s - x_shift);
    let m = (lut.clip.min as i128) << (s - lut.in_shift);
    let step = -m;
    let n = (m - big_x + step - 1) / step;
    let rest = big_x + n * step;
    debug_assert!(rest >= m && rest <= 0);

    let o = lut.out_shift;
    let factor = lut.value(lut.clip.min) as i128;
    let mut acc = interp_fixed(lut, rest as i64, s, frac) as i128;
    let mut acc_shift = o + frac as i32;
    for _ in 0..n {
        if acc == 0 {
            break;
        }
        acc *= factor;
        acc_shift += o;
        let excess = bit_len(acc.unsigned_abs()).saturating_sub(40);
        if excess > 0 {
            acc = rne_shr_i128(acc, excess);
            acc_shift -= excess as i32;
        }
    }
    let mut extra = acc_shift - o;
    if extra > cap {
        acc = rne_shr_i128(acc, (extra - cap) as u32);
        extra = cap;
    }
    (acc as i64, extra)
}

/// Table exp for `x * 2^-x_shift <= 0`. Inside the sampling range this is
/// [`lookup_interp`]; below it the argument is split into copies of the range
/// minimum plus an in-range rest, and the looked-up factors are multiplied.
///
/// Returns `(code, extra_shift)` meaning `code * 2^-(out_shift + extra_shift)`.
pub fn exp_with_decomposition(lut: &Lut256, x: i64, x_shift: i32) -> (i64, i32) {
    if lut.in_range(x, x_shift) {
        (lookup_interp(lut, x, x_shift) as i64, 0)
    } else {
        exp_fixed(lut, x, x_shift, 0)
    }
}

/// `sqrt(v * 2^-v_shift)` as `code * 2^-(out_shift + extra)`.
fn sqrt_fixed(lut: &Lut256, v: i128, v_shift: i32, frac: u32) -> (i64, i32) {
    if v <= 0 {
        return (0, frac as i32);
    }
    let (mut v, mut vs) = (v, v_shift);
    let excess = bit_len(v as u128).saturating_sub(62);
    if excess > 0 {
        v = rne_shr_i128(v, excess);
        vs -= excess as i32;
    }
    // key-unit magnitude lands in [2^a, 2^(a+2)) with a = floor(log2(clip.min))
    let anchor = bit_len(lut.clip.min.max(1) as u128) as i32 - 1;
    let floor_log2 = bit_len(v as u128) as i32 - 1;
    let t = (floor_log2 + lut.in_shift - vs - anchor).div_euclid(2);
    let r = interp_fixed(lut, v as i64, vs + 2 * t, frac);
    (r, frac as i32 - t)
}

/// Table sqrt of `v * 2^-v_shift >= 0`: `v = m * 4^t` with `m` in the
/// sampling range, so `sqrt(v) = sqrt(m) * 2^t` and only the shift changes.
///
/// Returns `(code, extra_shift)` meaning `code * 2^-(out_shift + extra_shift)`.
pub fn sqrt_with_decomposition(lut: &Lut256, v: i64, v_shift: i32) -> Result<(i64, i32)> {
    if v < 0 {
        return Err(invalid_arg("sqrt of a negative value"));
    }
    Ok(sqrt_fixed(lut, v as i128, v_shift, 0))
}

/// Element-wise GELU through the table; each output tile is re-encoded with
/// its own shift.
pub fn gelu(x: &BlockQTensor, lut: &Lut256, out: OutputSpec) -> Result<BlockQTensor> {
    let s_out = lut.out_shift + GELU_FRAC as i32;
    BlockQTensor::from_elements(x.shape.clone(), x.grid.block_size, out.codec, out.clip, |r, c| {
        let (v, s) = x.element(r, c);
        (interp_fixed(lut, v as i64, s, GELU_FRAC), s_out)
    })
}

#[derive(Debug, Clone)]
pub struct SoftmaxOutput {
    pub tensor: BlockQTensor,
    /// Rows whose exp sum vanished and were given a uniform output.
    pub degenerate_rows: Vec<usize>,
}

/// Row-wise softmax in integer arithmetic.
///
/// Per row: align codes, subtract the row maximum (exact), table exp, integer
/// sum, `(e << 15) / sum` division, and re-encoding of each output tile.
pub fn softmax(x: &BlockQTensor, lut: &Lut256, out: OutputSpec) -> Result<SoftmaxOutput> {
    let (rows, cols) = (x.rows(), x.cols());
    if cols >= 1 << 15 {
        return Err(invalid_arg("softmax rows are limited to 32767 elements"));
    }
    let per_row: Vec<(Vec<i64>, bool)> = (0..rows)
        .into_par_iter()
        .map(|r| -> Result<(Vec<i64>, bool)> {
            let (vals, s) = align_common(&x.row_elements(r), 30);
            let max = vals.iter().copied().max().unwrap_or(0);
            let e: Vec<i64> = vals
                .iter()
                .map(|&v| {
                    let (code, extra) = exp_fixed(lut, v - max, s, EXP_FRAC);
                    shift_by(code, EXP_FRAC as i32 - extra)
                })
                .collect();
            let sum: i64 = e.iter().sum();
            if sum == 0 {
                let u = rne_div(1 << DIV_FRAC_BITS, cols.max(1) as i64);
                return Ok((vec![u; cols], true));
            }
            let p = e
                .iter()
                .map(|&v| scaled_div(v as i32, sum as i32).map(|q| q as i64))
                .collect::<Result<Vec<_>>>()?;
            Ok((p, false))
        })
        .collect::<Result<_>>()?;
    let degenerate_rows = per_row.iter().enumerate().filter(|(_, p)| p.1).map(|(i, _)| i).collect();
    let tensor = BlockQTensor::from_elements(x.shape.clone(), x.grid.block_size, out.codec, out.clip, |r, c| {
        (per_row[r].0[c], DIV_FRAC_BITS as i32)
    })?;
    Ok(SoftmaxOutput { tensor, degenerate_rows })
}

#[derive(Debug, Clone)]
pub struct LayerNormOutput {
    pub tensor: BlockQTensor,
    /// Rows with zero variance; their normalized term is taken as 0.
    pub zero_variance_rows: Vec<usize>,
}

/// Row-wise LayerNorm with integer statistics and a table square root.
///
/// With `a` the aligned row and `n` its length, `D = n*sum(a^2) - sum(a)^2`
/// (plus eps on the same scale) gives `(x - E[x]) / sqrt(Var + eps)` as
/// `(n*a - sum(a)) / sqrt(D)`, one scaled division per element.
pub fn layer_norm(
    x: &BlockQTensor,
    gamma: &BlockQTensor,
    beta: &BlockQTensor,
    sqrt_lut: &Lut256,
    eps: f64,
    out: OutputSpec,
) -> Result<LayerNormOutput> {
    let (rows, n) = (x.rows(), x.cols());
    if gamma.shape != [n] || beta.shape != [n] {
        return Err(invalid_arg(format!("gamma/beta must have shape [{n}]")));
    }
    let o = sqrt_lut.out_shift;
    let per_row: Vec<(Vec<(i64, i32)>, bool)> = (0..rows)
        .into_par_iter()
        .map(|r| -> Result<(Vec<(i64, i32)>, bool)> {
            let (a, s) = align_common(&x.row_elements(r), 16);
            let n128 = n as i128;
            let s1: i128 = a.iter().map(|&v| v as i128).sum();
            let s2: i128 = a.iter().map(|&v| (v as i128) * (v as i128)).sum();
            let eps_term = (eps * (n as f64).powi(2) * 2f64.powi(2 * s)).round_ties_even();
            let eps_term = if eps_term.is_finite() { eps_term.min(1e30) as i128 } else { 0 };
            let d = n128 * s2 - s1 * s1 + eps_term;
            let centered: Vec<i128> = a.iter().map(|&v| n128 * v as i128 - s1).collect();
            let peak = centered.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
            let beta_at = |c: usize| {
                let (b, sb) = beta.element(0, c);
                (b as i64, sb)
            };
            if d <= 0 || peak == 0 {
                return Ok(((0..n).map(beta_at).collect(), true));
            }
            let (root, extra) = sqrt_fixed(sqrt_lut, d, 0, SQRT_FRAC);
            let g = bit_len(peak).saturating_sub(16);
            let y_shift = DIV_FRAC_BITS as i32 - g as i32 - o - extra;
            let mut outv = Vec::with_capacity(n);
            for (c, &cv) in centered.iter().enumerate() {
                let num = rne_shr_i128(cv, g) as i32;
                let q = scaled_div(num, root as i32)? as i64;
                let (gc, sg) = gamma.element(0, c);
                let (bc, sb) = beta.element(0, c);
                let (v, s) = align_common(&[(q * gc as i64, y_shift + sg), (bc as i64, sb)], 62);
                outv.push((v[0] + v[1], s));
            }
            Ok((outv, false))
        })
        .collect::<Result<_>>()?;
    let zero_variance_rows = per_row.iter().enumerate().filter(|(_, p)| p.1).map(|(i, _)| i).collect();
    let tensor = BlockQTensor::from_elements(x.shape.clone(), x.grid.block_size, out.codec, out.clip, |r, c| {
        per_row[r].0[c]
    })?;
    Ok(LayerNormOutput { tensor, zero_variance_rows })
}

/// Multiplies scores by `1 / sqrt(d_k)`, the reciprocal taken by scaled integer
/// division of one by the table square root.
pub fn attention_scale(scores: &BlockQTensor, d_k: usize, sqrt_lut: &Lut256, out: OutputSpec) -> Result<BlockQTensor> {
    if d_k == 0 {
        return Err(invalid_arg("d_k must be positive"));
    }
    let (root, extra) = sqrt_fixed(sqrt_lut, d_k as i128, 0, SQRT_FRAC);
    let recip = rne_div(1 << 30, root);
    let recip_shift = 30 - sqrt_lut.out_shift - extra;
    BlockQTensor::from_elements(scores.shape.clone(), scores.grid.block_size, out.codec, out.clip, |r, c| {
        let (v, s) = scores.element(r, c);
        (v as i64 * recip, s + recip_shift)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::Codec;
    use crate::nonlinear::{exp_lut_for_range, gelu_f64, gelu_lut_for_range, sqrt_lut};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step_at(t: &BlockQTensor, r: usize, c: usize) -> f64 {
        2f64.powi(-t.element(r, c).1)
    }

    fn quantized_rows(rows: &[Vec<f32>], bs: usize) -> BlockQTensor {
        let cols = rows[0].len();
        let data = rows.iter().flatten().copied().collect();
        let t = Tensor::new(vec![rows.len(), cols], data).unwrap();
        BlockQTensor::quantize(&t, bs, Codec::Int8, crate::quantizer::ClipBounds::full(Codec::Int8)).unwrap()
    }

    #[test]
    fn scaled_div_rounds_half_even() {
        assert_eq!(scaled_div(1, 2).unwrap(), 1 << 14);
        assert_eq!(scaled_div(1, 3).unwrap(), 10923); // 10922.67
        assert_eq!(scaled_div(-1, 3).unwrap(), -10923);
        assert_eq!(scaled_div(3, 1 << 16).unwrap(), 2); // 1.5 -> 2
        assert_eq!(scaled_div(5, 1 << 16).unwrap(), 2); // 2.5 -> 2
        assert!(scaled_div(1 << 16, 3).is_err());
        assert!(scaled_div(1, 0).is_err());
    }

    #[test]
    fn exp_in_range_is_plain_lookup() {
        let lut = exp_lut_for_range(4.0);
        for key in lut.clip.min..=lut.clip.max {
            let (code, extra) = exp_with_decomposition(&lut, key as i64, lut.in_shift);
            assert_eq!(extra, 0);
            assert_eq!(code, lut.value(key) as i64);
        }
    }

    #[test]
    fn exp_of_twice_the_minimum_is_the_square() {
        let lut = exp_lut_for_range(4.0);
        let m = lut.clip.min as i64;
        let (code, extra) = exp_with_decomposition(&lut, 2 * m, lut.in_shift);
        let got = code as f64 * 2f64.powi(-(lut.out_shift + extra));
        let square = (lut.value(lut.clip.min) as f64 * lut.out_step()).powi(2);
        assert!((got - square).abs() <= lut.out_step(), "{got} vs {square}");
        let exact = (2.0 * m as f64 * 2f64.powi(-lut.in_shift)).exp();
        assert!((got - exact).abs() <= lut.out_step());
    }

    #[test]
    fn exp_underflow_gives_zero() {
        let lut = exp_lut_for_range(4.0);
        let (code, _) = exp_with_decomposition(&lut, -100_000, 0);
        assert_eq!(code, 0);
        let (code, _) = exp_with_decomposition(&lut, -70, 0);
        assert_eq!(code, 0);
    }

    #[test]
    fn exp_out_of_range_within_one_step_of_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for max in [4.0, 2.0, 1.0] {
            let lut = exp_lut_for_range(max);
            let lo = lut.clip.min as f64 * 2f64.powi(-lut.in_shift);
            for _ in 0..1000 {
                let s = rng.gen_range(0..8);
                let x = rng.gen_range((12.0 * lo) * 2f64.powi(s)..lo * 2f64.powi(s)) as i64;
                let (code, extra) = exp_with_decomposition(&lut, x, s);
                let got = code as f64 * 2f64.powi(-(lut.out_shift + extra));
                let exact = (x as f64 * 2f64.powi(-s)).exp();
                assert!((got - exact).abs() <= lut.out_step(), "x={x} s={s}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn sqrt_examples() {
        let lut = sqrt_lut();
        assert_eq!(sqrt_with_decomposition(&lut, 0, 0).unwrap().0, 0);
        for key in lut.clip.min..=lut.clip.max {
            let (code, extra) = sqrt_with_decomposition(&lut, key as i64, lut.in_shift).unwrap();
            assert_eq!((code, extra), (lut.value(key) as i64, 0));
        }
        for key in lut.clip.min..=lut.clip.max {
            let (code, extra) = sqrt_with_decomposition(&lut, 4 * key as i64, lut.in_shift).unwrap();
            let got = code as f64 * 2f64.powi(-(lut.out_shift + extra));
            let twice = 2.0 * (key as f64 * 2f64.powi(-lut.in_shift)).sqrt();
            assert!((got - twice).abs() <= lut.out_step(), "key {key}: {got} vs {twice}");
        }
        assert!(sqrt_with_decomposition(&lut, -1, 0).is_err());
    }

    #[test]
    fn sqrt_out_of_range_within_one_step_of_f64() {
        let lut = sqrt_lut();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let v: i64 = rng.gen_range(1..1i64 << 40);
            let s = rng.gen_range(-10..30);
            let (code, extra) = sqrt_with_decomposition(&lut, v, s).unwrap();
            let step = 2f64.powi(-(lut.out_shift + extra));
            let got = code as f64 * step;
            let exact = (v as f64 * 2f64.powi(-s)).sqrt();
            assert!((got - exact).abs() <= step, "v={v} s={s}: {got} vs {exact}");
        }
    }

    #[test]
    fn gelu_examples() {
        let lut = gelu_lut_for_range(6.0);
        let x = quantized_rows(&[vec![0.0, 5.9, -5.9, 1.0]], 64);
        let y = gelu(&x, &lut, OutputSpec::full(Codec::Int8)).unwrap();
        let d = y.dequantize();
        assert_eq!(d.data()[0], 0.0);
        assert!((d.data()[1] - 5.9).abs() < 0.1);
        assert!(d.data()[2].abs() < 0.05);
        assert!((d.data()[3] as f64 - gelu_f64(1.0)).abs() <= 2.0 * step_at(&y, 0, 3));
    }

    #[test]
    fn gelu_random_inputs_within_two_steps() {
        let lut = gelu_lut_for_range(4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let row: Vec<f32> = (0..1000).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = quantized_rows(&[row], 8);
        let y = gelu(&x, &lut, OutputSpec::full(Codec::Int8)).unwrap();
        let (xd, yd) = (x.dequantize(), y.dequantize());
        for c in 0..1000 {
            let exact = gelu_f64(xd.data()[c] as f64);
            let err = (yd.data()[c] as f64 - exact).abs();
            assert!(err <= 2.0 * step_at(&y, 0, c).max(lut.out_step()), "{c}: err {err}");
        }
    }

    fn softmax_f64(row: &[f64]) -> Vec<f64> {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_uniform_row_is_exact() {
        for n in [2usize, 4, 64, 100] {
            let x = quantized_rows(&[vec![0.75; n]], 64);
            let y = softmax(&x, &exp_lut_for_range(1.0), OutputSpec::full(Codec::Int8)).unwrap();
            let expected = BlockQTensor::quantize(
                &Tensor::new(vec![1, n], vec![1.0 / n as f32; n]).unwrap(),
                64,
                Codec::Int8,
                crate::quantizer::ClipBounds::full(Codec::Int8),
            )
            .unwrap();
            assert_eq!(y.tensor.codes, expected.codes, "n={n}");
        }
    }

    #[test]
    fn softmax_two_element_extreme_row() {
        let x = quantized_rows(&[vec![0.0, -127.0]], 64);
        let y = softmax(&x, &exp_lut_for_range(16.0), OutputSpec::full(Codec::Int8)).unwrap();
        let d = y.tensor.dequantize();
        assert!((d.data()[0] - 1.0).abs() < 0.01);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn softmax_random_rows_match_f64() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let lut = exp_lut_for_range(16.0);
        // logits ~ N(0, 0.25)
        let normal = Normal::new(0.0, 0.5).unwrap();
        for r in 0..1000 {
            let row: Vec<f32> = (0..64).map(|_| normal.sample(&mut rng) as f32).collect();
            let x = quantized_rows(&[row], 64);
            let y = softmax(&x, &lut, OutputSpec::full(Codec::Int8)).unwrap();
            let (xd, yd) = (x.dequantize(), y.tensor.dequantize());
            let input: Vec<f64> = xd.data().iter().map(|&v| v as f64).collect();
            let exact = softmax_f64(&input);
            let step = step_at(&y.tensor, 0, 0);
            for c in 0..64 {
                let got = yd.data()[c] as f64;
                assert!((got - exact[c]).abs() <= 2.0 * step, "row {r} col {c}");
            }
            let sum: f64 = yd.data().iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1.0 / 64.0, "row {r} sum {sum}");
        }
    }

    #[test]
    fn softmax_zero_sum_row_is_uniform_and_flagged() {
        let lut = build_tail_free_exp();
        let x = quantized_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]], 64);
        let y = softmax(&x, &lut, OutputSpec::full(Codec::Int8)).unwrap();
        assert_eq!(y.degenerate_rows, vec![0, 1]);
        let half = quantized_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]], 64);
        assert_eq!(y.tensor.codes, half.codes);
        assert_eq!(y.tensor.shifts, half.shifts);
    }

    // exp table whose values are all zero, so every row sums to zero
    fn build_tail_free_exp() -> Lut256 {
        let mut lut = exp_lut_for_range(1.0);
        lut.values = [0; 256];
        lut
    }

    fn layer_norm_f64(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
            .collect()
    }

    fn vector(v: &[f32]) -> BlockQTensor {
        let t = Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        BlockQTensor::quantize(&t, 64, Codec::Int8, crate::quantizer::ClipBounds::full(Codec::Int8)).unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        let lut = sqrt_lut();
        let ones = vector(&[1.0; 4]);
        let zeros = vector(&[0.0; 4]);
        let x = quantized_rows(&[vec![0.5; 4]], 64);
        let y = layer_norm(&x, &ones, &zeros, &lut, 1e-12, OutputSpec::full(Codec::Int8)).unwrap();
        assert!(y.tensor.dequantize().data().iter().all(|&v| v == 0.0));
        assert_eq!(y.zero_variance_rows, vec![0]);

        let x = quantized_rows(&[vec![-1.0, 1.0]], 64);
        let y = layer_norm(&x, &vector(&[1.0; 2]), &vector(&[0.0; 2]), &lut, 1e-12, OutputSpec::full(Codec::Int8))
            .unwrap();
        let d = y.tensor.dequantize();
        assert!((d.data()[0] + 1.0).abs() < 0.02 && (d.data()[1] - 1.0).abs() < 0.02, "{:?}", d.data());
    }

    #[test]
    fn layer_norm_zero_variance_returns_beta() {
        let x = quantized_rows(&[vec![2.0; 3]], 64);
        let beta = vector(&[0.25, -0.5, 1.0]);
        let y = layer_norm(&x, &vector(&[1.0; 3]), &beta, &sqrt_lut(), 1e-12, OutputSpec::full(Codec::Int8)).unwrap();
        // 1.0 is the block maximum and a power of two, so it is stored as 127/128
        assert_eq!(y.tensor.dequantize().data(), beta.dequantize().data());
        assert_eq!(y.zero_variance_rows, vec![0]);
    }

    #[test]
    fn layer_norm_random_rows_match_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rows: Vec<Vec<f32>> = (0..1000)
            .map(|_| {
                let scale = rng.gen_range(0.1..10.0);
                let shift = rng.gen_range(-2.0..2.0);
                (0..64).map(|_| shift + rng.gen_range(-scale..scale)).collect()
            })
            .collect();
        let gamma: Vec<f32> = (0..64).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (g, b) = (vector(&gamma), vector(&beta));
        let x = quantized_rows(&rows, 64);
        let y = layer_norm(&x, &g, &b, &sqrt_lut(), 1e-12, OutputSpec::full(Codec::Int8)).unwrap();
        let (xd, yd, gd, bd) = (x.dequantize(), y.tensor.dequantize(), g.dequantize(), b.dequantize());
        let gd: Vec<f64> = gd.data().iter().map(|&v| v as f64).collect();
        let bd: Vec<f64> = bd.data().iter().map(|&v| v as f64).collect();
        for r in 0..1000 {
            let input: Vec<f64> = xd.row(r).iter().map(|&v| v as f64).collect();
            let exact = layer_norm_f64(&input, &gd, &bd, 1e-12);
            for c in 0..64 {
                let err = (yd.row(r)[c] as f64 - exact[c]).abs();
                assert!(err <= 3.0 * step_at(&y.tensor, r, c), "row {r} col {c}: err {err}");
            }
        }
    }

    #[test]
    fn attention_scale_by_power_of_two_is_a_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let rows: Vec<Vec<f32>> = (0..8).map(|_| (0..8).map(|_| rng.gen_range(-20.0..20.0)).collect()).collect();
        let x = quantized_rows(&rows, 8);
        let y = attention_scale(&x, 64, &sqrt_lut(), OutputSpec::full(Codec::Int8)).unwrap();
        assert_eq!(y.codes, x.codes);
        let shifted: Vec<i8> = x.shifts.iter().map(|s| s + 3).collect();
        assert_eq!(y.shifts, shifted);
    }

    #[test]
    fn attention_scale_non_power_of_two_within_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f32>> = (0..16).map(|_| (0..16).map(|_| rng.gen_range(-20.0..20.0)).collect()).collect();
        let x = quantized_rows(&rows, 8);
        let y = attention_scale(&x, 48, &sqrt_lut(), OutputSpec::full(Codec::Int8)).unwrap();
        let (xd, yd) = (x.dequantize(), y.dequantize());
        for r in 0..16 {
            for c in 0..16 {
                let exact = xd.row(r)[c] as f64 / 48f64.sqrt();
                assert!((yd.row(r)[c] as f64 - exact).abs() <= 2.0 * step_at(&y, r, c));
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(codes in prop::collection::vec(-100i8..=100, 1..64), offset in -27i8..=27, s in 0i32..6) {
            let n = codes.len();
            let build = |off: i8| {
                let mut q = quantized_rows(&[vec![0.0; n]], 64);
                for (dst, &c) in q.codes.iter_mut().zip(&codes) {
                    *dst = c + off;
                }
                q.shifts[0] = s as i8;
                q
            };
            let lut = exp_lut_for_range(8.0);
            let a = softmax(&build(0), &lut, OutputSpec::full(Codec::Int8)).unwrap();
            let b = softmax(&build(offset), &lut, OutputSpec::full(Codec::Int8)).unwrap();
            prop_assert_eq!(a.tensor.codes, b.tensor.codes);
            prop_assert_eq!(a.tensor.shifts, b.tensor.shifts);
        }

        #[test]
        fn softmax_sums_to_one_within_n_steps(row in prop::collection::vec(-12f32..12.0, 1..=128)) {
            let n = row.len();
            let x = quantized_rows(&[row], 128);
            let y = softmax(&x, &exp_lut_for_range(24.0), OutputSpec::full(Codec::Int8)).unwrap();
            let sum: f64 = y.tensor.dequantize().data().iter().map(|&v| v as f64).sum();
            let step = step_at(&y.tensor, 0, 0);
            prop_assert!((sum - 1.0).abs() <= n as f64 * step, "sum {}", sum);
        }

        #[test]
        fn interpolation_stays_between_neighbours(key in -128i32..127, rem in 1i64..256, max in 0.5f64..16.0) {
            let exp = exp_lut_for_range(max);
            let sq = sqrt_lut();
            for lut in [&exp, &sq] {
                if key < lut.clip.min || key >= lut.clip.max {
                    continue;
                }
                let x = ((key as i64) << 8) + rem;
                let v = interp_fixed(lut, x, lut.in_shift + 8, 8);
                let (a, b) = ((lut.value(key) as i64) << 8, (lut.value(key + 1) as i64) << 8);
                prop_assert!(v >= a.min(b) && v <= a.max(b));
            }
        }

        #[test]
        fn decomposition_agrees_with_direct_lookup_on_overlap(key in -128i32..=0, max in 0.5f64..16.0) {
            // key + m lies below the table, so it takes the split path
            let lut = exp_lut_for_range(max);
            let m = lut.clip.min as i64;
            let (code, extra) = exp_with_decomposition(&lut, key as i64 + m, lut.in_shift);
            let got = code as f64 * 2f64.powi(-(lut.out_shift + extra));
            let direct = lut.value(key) as f64 * lut.value(lut.clip.min) as f64 * lut.out_step().powi(2);
            prop_assert!((got - direct).abs() <= lut.out_step());
        }
    }
}
