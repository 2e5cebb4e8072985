//! Low-bit block matrix multiplication with exponent-section alignment.
//!
//! `Y = X * W^T + B` is evaluated tile by tile: every product of an input tile
//! and a weight tile is an exact `i32` block carrying shift `sX + sW`; the
//! products of one output tile are aligned to the largest shift by left
//! shifts, summed in ascending `k`, the bias is brought onto the same shift,
//! and the sum is re-encoded to a low-bit output tile.

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::error::{invalid_arg, BctError, Result};
use crate::fixed::{bit_len, requantize_fixed, rne_shr_i128};
use crate::formats::Codec;
use crate::quantizer::{codec_bits, BlockQTensor, ClipBounds};
use crate::tensor::BlockGrid;

/// Exact product of one input tile and one (transposed) weight tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductBlock {
    pub values: Vec<i32>,
    pub shift: i32,
}

/// 32-bit accumulator tile with its common shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WideAccumulator {
    pub values: Vec<i32>,
    pub shift: i32,
    /// Bits dropped to stay inside 32 bits (0 when the sum was exact).
    pub renormalized: u32,
}

impl WideAccumulator {
    pub fn value(&self, i: usize) -> f64 {
        self.values[i] as f64 * 2f64.powi(-self.shift)
    }
}

/// Output codec and clip for a requantized tensor site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputSpec {
    pub codec: Codec,
    pub clip: ClipBounds,
}

impl OutputSpec {
    pub fn full(codec: Codec) -> Self {
        Self { codec, clip: ClipBounds::full(codec) }
    }
}

/// `X_tile * W_tile^T` over `bs x bs` row-major tiles.
pub fn block_product(x: &[i8], x_shift: i32, w: &[i8], w_shift: i32, bs: usize) -> ProductBlock {
    let mut values = vec![0i32; bs * bs];
    product_into(x, w, bs, bs, bs, &mut values);
    ProductBlock { values, shift: x_shift + w_shift }
}

/// Inner kernel restricted to the first `rows` input rows and `cols` weight
/// rows; the remaining cells are padding and stay zero.
fn product_into(x: &[i8], w: &[i8], bs: usize, rows: usize, cols: usize, out: &mut [i32]) {
    for r in 0..rows {
        let xr = &x[r * bs..(r + 1) * bs];
        let o = &mut out[r * bs..r * bs + cols];
        for (c, slot) in o.iter_mut().enumerate() {
            let wr = &w[c * bs..(c + 1) * bs];
            *slot = xr.iter().zip(wr).map(|(&a, &b)| a as i32 * b as i32).sum();
        }
    }
}

/// Sums integer terms onto their largest shift. If the exact sum does not fit
/// 32 bits, the whole tile moves to `shift_max - d` for the smallest `d` that
/// fits, rounding half to even.
fn combine(terms: &[(&[i64], i32)], len: usize) -> WideAccumulator {
    let shift_max = terms.iter().map(|t| t.1).max().expect("non-empty");
    let live: Vec<&(&[i64], i32)> = terms.iter().filter(|t| t.0.iter().any(|&v| v != 0)).collect();
    let max_left = live.iter().map(|t| shift_max - t.1).max().unwrap_or(0);
    let need = live
        .iter()
        .map(|(vals, s)| {
            let peak = vals.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
            bit_len(peak as u128) + (shift_max - s) as u32
        })
        .max()
        .unwrap_or(0)
        + bit_len(live.len() as u128);
    if need <= 62 {
        let mut sums = vec![0i64; len];
        for (vals, s) in &live {
            let e = (shift_max - s) as u32;
            for (acc, &v) in sums.iter_mut().zip(vals.iter()) {
                *acc += v << e;
            }
        }
        return fit_i32(&sums, shift_max);
    }
    if max_left <= 90 {
        let mut sums = vec![0i128; len];
        for (vals, s) in &live {
            let e = (shift_max - s) as u32;
            for (acc, &v) in sums.iter_mut().zip(vals.iter()) {
                *acc += (v as i128) << e;
            }
        }
        return fit_i32(&sums, shift_max);
    }

    let mut sums = vec![BigInt::zero(); len];
    for (vals, s) in &live {
        let e = (shift_max - s) as usize;
        for (acc, &v) in sums.iter_mut().zip(vals.iter()) {
            *acc += BigInt::from(v) << e;
        }
    }
    let peak = sums.iter().map(|v| v.bits()).max().unwrap_or(0) as u32;
    let mut d = peak.saturating_sub(31);
    loop {
        let scaled: Vec<BigInt> = sums.iter().map(|v| rne_shr_big(v, d)).collect();
        if scaled.iter().all(|v| v.abs() <= BigInt::from(i32::MAX)) {
            return WideAccumulator {
                values: scaled.iter().map(|v| v.to_i32().expect("fits")).collect(),
                shift: shift_max - d as i32,
                renormalized: d,
            };
        }
        d += 1;
    }
}

/// Moves exact sums at `shift_max` onto the largest shift whose values fit
/// 32 bits.
fn fit_i32<V: Copy + Into<i128>>(sums: &[V], shift_max: i32) -> WideAccumulator {
    let limit = i32::MAX as i128;
    let peak = sums.iter().map(|&v| v.into().unsigned_abs()).max().unwrap_or(0);
    let mut d = bit_len(peak).saturating_sub(31);
    loop {
        let scaled: Vec<i128> = sums.iter().map(|&v| rne_shr_i128(v.into(), d)).collect();
        if scaled.iter().all(|v| v.abs() <= limit) {
            return WideAccumulator {
                values: scaled.into_iter().map(|v| v as i32).collect(),
                shift: shift_max - d as i32,
                renormalized: d,
            };
        }
        d += 1;
    }
}

fn rne_shr_big(v: &BigInt, n: u32) -> BigInt {
    if n == 0 {
        return v.clone();
    }
    let neg = v.is_negative();
    let mag = v.abs();
    let floor = &mag >> n as usize;
    let rem = &mag - (&floor << n as usize);
    let half = BigInt::from(1) << (n as usize - 1);
    let up = rem > half || (rem == half && (&floor & BigInt::from(1)) == BigInt::from(1));
    let q = if up { floor + 1 } else { floor };
    if neg {
        -q
    } else {
        q
    }
}

/// Aligns block products onto `shift_max = max(shift_k)` and sums them.
pub fn accumulate(products: &[ProductBlock]) -> Result<WideAccumulator> {
    let first = products.first().ok_or_else(|| invalid_arg("nothing to accumulate"))?;
    let len = first.values.len();
    if products.iter().any(|p| p.values.len() != len) {
        return Err(invalid_arg("product blocks differ in shape"));
    }
    let widened: Vec<Vec<i64>> =
        products.iter().map(|p| p.values.iter().map(|&v| v as i64).collect()).collect();
    let terms: Vec<(&[i64], i32)> =
        widened.iter().zip(products).map(|(v, p)| (v.as_slice(), p.shift)).collect();
    Ok(combine(&terms, len))
}

/// Adds a bias segment (one value per output column) to every row of an
/// accumulator tile of width `bs`.
///
/// The bias moves onto the accumulator shift: left when its shift is smaller,
/// right with round-half-even when larger.
pub fn add_bias(acc: &WideAccumulator, bias: &[i8], bias_shift: i32, bs: usize) -> Result<WideAccumulator> {
    if bias.len() != bs || acc.values.len() % bs != 0 {
        return Err(invalid_arg("bias segment does not match tile width"));
    }
    Ok(add_bias_within(acc, bias, bias_shift, bs, acc.values.len() / bs, bs))
}

/// [`add_bias`] restricted to the valid `rows x cols` corner of the tile, so
/// padding stays zero.
fn add_bias_within(acc: &WideAccumulator, bias: &[i8], bias_shift: i32, bs: usize, rows: usize, cols: usize) -> WideAccumulator {
    let (aligned_shift, seg): (i32, Vec<i64>) = if bias_shift <= acc.shift {
        (bias_shift, bias.iter().map(|&v| v as i64).collect())
    } else {
        let n = (bias_shift - acc.shift) as u32;
        (acc.shift, bias.iter().map(|&v| rne_shr_i128(v as i128, n) as i64).collect())
    };
    let mut b = vec![0i64; acc.values.len()];
    for r in 0..rows {
        b[r * bs..r * bs + cols].copy_from_slice(&seg[..cols]);
    }
    let a: Vec<i64> = acc.values.iter().map(|&v| v as i64).collect();
    let mut out = combine(&[(&a, acc.shift), (&b, aligned_shift)], a.len());
    out.renormalized += acc.renormalized;
    out
}

/// Re-encodes an accumulator tile with the shift rule (integer arithmetic).
pub fn requantize_output(acc: &WideAccumulator, out: OutputSpec) -> Result<(Vec<i8>, i32)> {
    let k = codec_bits(out.codec)?;
    let clip = out.clip.validate(out.codec)?;
    let vals: Vec<i64> = acc.values.iter().map(|&v| v as i64).collect();
    Ok(requantize_fixed(&vals, acc.shift, k, clip.min, clip.max))
}

fn check_operands(cx: &BlockQTensor, cw: &BlockQTensor, cb: Option<&BlockQTensor>) -> Result<()> {
    if cx.shape.len() != 2 || cw.shape.len() != 2 {
        return Err(invalid_arg("linear layer needs matrix operands"));
    }
    if cx.cols() != cw.cols() {
        return Err(invalid_arg(format!(
            "inner dimensions differ: {} vs {}",
            cx.cols(),
            cw.cols()
        )));
    }
    if cx.grid.block_size != cw.grid.block_size {
        return Err(invalid_arg("operands use different block sizes"));
    }
    if let Some(b) = cb {
        if b.shape != [cw.rows()] || b.grid.block_size != cw.grid.block_size {
            return Err(invalid_arg(format!("bias shape {:?} does not match {} outputs", b.shape, cw.rows())));
        }
    }
    Ok(())
}

/// Accumulator tiles of `X * W^T (+ B)` in output-grid order.
pub fn linear_accumulators(
    cx: &BlockQTensor,
    cw: &BlockQTensor,
    cb: Option<&BlockQTensor>,
) -> Result<(BlockGrid, Vec<WideAccumulator>)> {
    check_operands(cx, cw, cb)?;
    let bs = cx.grid.block_size;
    let grid = BlockGrid::for_shape(&[cx.rows(), cw.rows()], bs)?;
    let inner = cx.grid.cols_of_blocks;
    let accs: Result<Vec<WideAccumulator>> = (0..grid.num_blocks())
        .into_par_iter()
        .map(|id| {
            let (i, j) = grid.block_coords(id);
            let (vr, vc) = grid.valid_extent(i, j);
            let acc = match tile_sum_i64(cx, cw, i, j, vr, vc) {
                Some(acc) => acc,
                None => {
                    let products: Vec<ProductBlock> = (0..inner)
                        .map(|k| {
                            let xa = cx.grid.block_id(i, k);
                            let wa = cw.grid.block_id(j, k);
                            let mut values = vec![0i32; bs * bs];
                            product_into(cx.block_codes(xa), cw.block_codes(wa), bs, vr, vc, &mut values);
                            ProductBlock { values, shift: cx.shift(xa) + cw.shift(wa) }
                        })
                        .collect();
                    accumulate(&products)?
                }
            };
            Ok(match cb {
                Some(b) => add_bias_within(&acc, b.block_codes(j), b.shift(j), bs, vr, vc),
                None => acc,
            })
        })
        .collect();
    Ok((grid, accs?))
}

/// Output tile `(i, j)` summed in `i64`; `None` when the aligned terms could
/// exceed 63 bits.
fn tile_sum_i64(cx: &BlockQTensor, cw: &BlockQTensor, i: usize, j: usize, vr: usize, vc: usize) -> Option<WideAccumulator> {
    let bs = cx.grid.block_size;
    let inner = cx.grid.cols_of_blocks;
    let ids: Vec<(usize, usize)> = (0..inner).map(|k| (cx.grid.block_id(i, k), cw.grid.block_id(j, k))).collect();
    let shifts: Vec<i32> = ids.iter().map(|&(xa, wa)| cx.shift(xa) + cw.shift(wa)).collect();
    let shift_max = *shifts.iter().max()?;
    // |product| <= bs * 2^14, and at most `inner` of them are added
    let headroom = 62i64 - bit_len(bs as u128) as i64 - 14 - bit_len(inner as u128) as i64;
    let mut buf = vec![0i32; bs * bs];
    let mut sums = vec![0i64; bs * bs];
    for (&(xa, wa), &s) in ids.iter().zip(&shifts) {
        product_into(cx.block_codes(xa), cw.block_codes(wa), bs, vr, vc, &mut buf);
        if buf.iter().all(|&v| v == 0) {
            continue;
        }
        let e = (shift_max - s) as i64;
        if e > headroom {
            return None;
        }
        for (acc, &v) in sums.iter_mut().zip(&buf) {
            *acc += (v as i64) << e;
        }
    }
    Some(fit_i32(&sums, shift_max))
}

/// Full blocked `Y = X * W^T + B`, re-encoded to `out`.
pub fn linear_layer(
    cx: &BlockQTensor,
    cw: &BlockQTensor,
    cb: Option<&BlockQTensor>,
    out: OutputSpec,
) -> Result<BlockQTensor> {
    if !cx.codec.is_int() || !cw.codec.is_int() || cb.is_some_and(|b| !b.codec.is_int()) {
        return Err(BctError::InvalidArgument("integer block GEMM needs int4/int8 operands".into()));
    }
    let (grid, accs) = linear_accumulators(cx, cw, cb)?;
    let tiles: Vec<(Vec<i64>, i32)> = accs
        .into_iter()
        .map(|a| (a.values.iter().map(|&v| v as i64).collect(), a.shift))
        .collect();
    BlockQTensor::from_tile_values(vec![cx.rows(), cw.rows()], grid, out.codec, out.clip, &tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use num_rational::Ratio;
    use rand::{Rng, SeedableRng};

    fn ratio_pow2(v: i64, shift: i32) -> Ratio<i128> {
        if shift >= 0 {
            Ratio::new(v as i128, 1i128 << shift)
        } else {
            Ratio::from_integer((v as i128) << (-shift))
        }
    }

    #[test]
    fn identity_tiles_multiply_to_identity() {
        let bs = 4;
        let mut id = vec![0i8; bs * bs];
        for i in 0..bs {
            id[i * bs + i] = 1;
        }
        let p = block_product(&id, 3, &id, 2, bs);
        assert_eq!(p.shift, 5);
        assert_eq!(p.values, id.iter().map(|&v| v as i32).collect::<Vec<_>>());
    }

    #[test]
    fn scalar_product_example() {
        let p = block_product(&[3], 2, &[5], 1, 1);
        assert_eq!((p.values[0], p.shift), (15, 3));
        assert_eq!(p.values[0] as f64 / 8.0, 0.75 * 2.5);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let bs = 8;
        let x: Vec<i8> = (0..bs * bs).map(|_| rng.gen()).collect();
        let w: Vec<i8> = (0..bs * bs).map(|_| rng.gen()).collect();
        let p = block_product(&x, 0, &w, 0, bs);
        for r in 0..bs {
            for c in 0..bs {
                let mut s = 0i64;
                for t in 0..bs {
                    s += x[r * bs + t] as i64 * w[c * bs + t] as i64;
                }
                assert_eq!(p.values[r * bs + c] as i64, s);
            }
        }
    }

    #[test]
    fn accumulate_examples() {
        let a = accumulate(&[
            ProductBlock { values: vec![3, 4], shift: 2 },
            ProductBlock { values: vec![5, -6], shift: 2 },
        ])
        .unwrap();
        assert_eq!((a.values.clone(), a.shift), (vec![8, -2], 2));
        let b = accumulate(&[
            ProductBlock { values: vec![4], shift: 1 },
            ProductBlock { values: vec![4], shift: 3 },
        ])
        .unwrap();
        assert_eq!((b.values[0], b.shift), (20, 3));
        assert_eq!(b.value(0), 2.5);
        assert!(accumulate(&[]).is_err());
    }

    #[test]
    fn accumulate_is_exact_against_rationals() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let q = rng.gen_range(1..6);
            let products: Vec<ProductBlock> = (0..q)
                .map(|_| ProductBlock {
                    values: (0..16).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect(),
                    shift: rng.gen_range(-3..12),
                })
                .collect();
            let acc = accumulate(&products).unwrap();
            if acc.renormalized > 0 {
                continue;
            }
            for i in 0..16 {
                let exact: Ratio<i128> =
                    products.iter().map(|p| ratio_pow2(p.values[i] as i64, p.shift)).sum();
                assert_eq!(ratio_pow2(acc.values[i] as i64, acc.shift), exact);
            }
        }
    }

    #[test]
    fn overflow_renormalizes_to_smallest_drop() {
        let big = ProductBlock { values: vec![i32::MAX, 1], shift: 0 };
        let acc = accumulate(&[big.clone(), big]).unwrap();
        assert_eq!(acc.renormalized, 1);
        assert_eq!(acc.shift, -1);
        assert_eq!(acc.values, vec![i32::MAX, 1]);
        // large shift spread exercises the wide path
        let acc = accumulate(&[
            ProductBlock { values: vec![1, 0], shift: 0 },
            ProductBlock { values: vec![0, 3], shift: 120 },
        ])
        .unwrap();
        assert_eq!(acc.shift, 120 - acc.renormalized as i32);
        assert_eq!(acc.values[0] as i64, 1i64 << 30);
    }

    #[test]
    fn bias_examples() {
        let acc = WideAccumulator { values: vec![20], shift: 3, renormalized: 0 };
        let out = add_bias(&acc, &[3], 1, 1).unwrap();
        assert_eq!((out.values[0], out.shift), (32, 3));
        assert_eq!(out.value(0), 4.0);
        let zero = add_bias(&acc, &[0], 5, 1).unwrap();
        assert_eq!(zero, acc);
        // finer bias rounds half to even onto the accumulator shift
        let out = add_bias(&acc, &[6], 5, 1).unwrap();
        assert_eq!(out.values[0], 22); // 6/4 = 1.5 -> 2
    }

    #[test]
    fn requantize_of_exact_output_is_lossless() {
        let acc = WideAccumulator { values: vec![96, -32, 8, 0], shift: 4, renormalized: 0 };
        let (codes, s) = requantize_output(&acc, OutputSpec::full(Codec::Int8)).unwrap();
        for (c, v) in codes.iter().zip(&acc.values) {
            assert_eq!(*c as f64 * 2f64.powi(-s), *v as f64 / 16.0);
        }
    }

    #[test]
    fn large_accumulator_gets_negative_shift() {
        let acc = WideAccumulator { values: vec![300, -150], shift: 0, renormalized: 0 };
        let (codes, s) = requantize_output(&acc, OutputSpec::full(Codec::Int8)).unwrap();
        assert_eq!(s, -2);
        assert_eq!(codes, vec![75, -38]); // -37.5 -> -38
    }

    #[test]
    fn single_tile_linear_is_product_plus_bias_requantized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::from_fn(4, 4, |_, _| rng.gen_range(-1.0f32..1.0));
        let w = Tensor::from_fn(4, 4, |_, _| rng.gen_range(-1.0f32..1.0));
        let b = Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let full = ClipBounds::full(Codec::Int8);
        let cx = BlockQTensor::quantize(&x, 4, Codec::Int8, full).unwrap();
        let cw = BlockQTensor::quantize(&w, 4, Codec::Int8, full).unwrap();
        let cb = BlockQTensor::quantize(&b, 4, Codec::Int8, full).unwrap();
        let y = linear_layer(&cx, &cw, Some(&cb), OutputSpec::full(Codec::Int8)).unwrap();
        let p = block_product(&cx.codes, cx.shift(0), &cw.codes, cw.shift(0), 4);
        let acc = add_bias(&accumulate(&[p]).unwrap(), &cb.codes, cb.shift(0), 4).unwrap();
        let (codes, s) = requantize_output(&acc, OutputSpec::full(Codec::Int8)).unwrap();
        assert_eq!(y.codes, codes);
        assert_eq!(y.shift(0), s);
    }

    #[test]
    fn bias_leaves_padding_rows_empty() {
        // one valid row in a 4x4 tile; a large bias must not reach rows 1..4
        let full = ClipBounds::full(Codec::Int8);
        let x = Tensor::matrix(1, 4, vec![0.01f32, 0.0, 0.0, 0.0]).unwrap();
        let w = Tensor::matrix(4, 4, vec![1.0f32; 16]).unwrap();
        let b = Tensor::new(vec![4], vec![-0.5f32, 0.0, 0.0, 0.0]).unwrap();
        let cx = BlockQTensor::quantize(&x, 4, Codec::Int8, full).unwrap();
        let cw = BlockQTensor::quantize(&w, 4, Codec::Int8, full).unwrap();
        let cb = BlockQTensor::quantize(&b, 4, Codec::Int8, full).unwrap();
        let (_, accs) = linear_accumulators(&cx, &cw, Some(&cb)).unwrap();
        assert!(accs[0].values[4..].iter().all(|&v| v == 0));
        let y = linear_layer(&cx, &cw, Some(&cb), OutputSpec::full(Codec::Int8)).unwrap();
        assert!(y.codes[4..].iter().all(|&v| v == 0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let full = ClipBounds::full(Codec::Int8);
        let a = BlockQTensor::quantize(&Tensor::<f32>::zeros(vec![2, 3]), 2, Codec::Int8, full).unwrap();
        let b = BlockQTensor::quantize(&Tensor::<f32>::zeros(vec![2, 4]), 2, Codec::Int8, full).unwrap();
        assert!(matches!(
            linear_layer(&a, &b, None, OutputSpec::full(Codec::Int8)),
            Err(BctError::InvalidArgument(_))
        ));
    }

    #[test]
    fn scaled_identity_weight_returns_scaled_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::from_fn(5, 8, |_, _| rng.gen_range(-1.0f32..1.0));
        let w = Tensor::from_fn(8, 8, |r, c| if r == c { 0.375 } else { 0.0 });
        let full = ClipBounds::full(Codec::Int8);
        let cx = BlockQTensor::quantize(&x, 4, Codec::Int8, full).unwrap();
        let cw = BlockQTensor::quantize(&w, 4, Codec::Int8, full).unwrap();
        let y = linear_layer(&cx, &cw, None, OutputSpec::full(Codec::Int8)).unwrap();
        let dy = y.dequantize();
        let dx = cx.dequantize();
        for r in 0..5 {
            for c in 0..8 {
                let (_, s) = y.element(r, c);
                let want = dx.at(r, c) as f64 * 0.375;
                assert!((dy.at(r, c) as f64 - want).abs() <= 2f64.powi(-s - 1));
            }
        }
    }
}
