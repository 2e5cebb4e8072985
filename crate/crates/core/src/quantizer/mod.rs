//! Blockwise symmetric shift quantization.
//!
//! Each tile `x` of a tensor gets its own power-of-two exponent
//! `shift = floor(log2(2^(k-1) / max|x|))` and codes
//! `clip(round_half_even(x * 2^shift), MIN, MAX)`; a code `c` in tile `b`
//! therefore stands for `c * 2^-shift[b]`.

mod calib;

pub use calib::{calibrate_clip, kl_threshold, CalibStats, HISTOGRAM_BINS, SWEEP_START};
pub(crate) use calib::{normalize, smooth};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, BctError, Result};
use crate::fixed::{align_common, clamp_shift, requantize_fixed, shift_for_real_max};
use crate::formats::{clip_round, pow2, Codec};
use crate::scalar::Scalar;
use crate::tensor::{partition, BlockGrid, Tensor};

/// Integer clip bounds applied to codes (`MIN`, `MAX`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub min: i32,
    pub max: i32,
}

impl ClipBounds {
    pub fn full(codec: Codec) -> Self {
        let (min, max) = codec.int_range().unwrap_or((-128, 127));
        Self { min, max }
    }

    /// Symmetric bounds `[-max - 1, max]`.
    pub fn symmetric(max: i32) -> Self {
        Self { min: -max - 1, max }
    }

    pub fn validate(self, codec: Codec) -> Result<Self> {
        let (lo, hi) = codec
            .int_range()
            .ok_or_else(|| invalid_arg(format!("{codec} has no integer clip range")))?;
        if self.min > self.max || self.min < lo || self.max > hi {
            return Err(invalid_arg(format!(
                "clip [{}, {}] outside {codec} range [{lo}, {hi}]",
                self.min, self.max
            )));
        }
        Ok(self)
    }
}

/// Bit count used by the shift rule for an integer codec.
pub fn codec_bits(codec: Codec) -> Result<u32> {
    match codec {
        Codec::Int4 => Ok(4),
        Codec::Int8 => Ok(8),
        c => Err(invalid_arg(format!("{c} is not an integer codec"))),
    }
}

/// `floor(log2(2^(k-1) / max_abs))`, or 0 for an all-zero block.
///
/// Evaluated exactly from the binary representation of `max_abs`; the result
/// is clamped to the `i8` shift range.
pub fn compute_shift<T: Scalar>(max_abs: T, k: u32) -> i32 {
    let m = max_abs.as_f64().abs();
    if m == 0.0 {
        0
    } else {
        clamp_shift(shift_for_real_max(m, k))
    }
}

pub fn block_shift<T: Scalar>(block: &[T], k: u32) -> i32 {
    compute_shift(block.iter().fold(T::zero(), |m, v| m.max(v.abs())), k)
}

/// Codes `clip(round_half_even(x * 2^shift), MIN, MAX)`.
pub fn quantize_block<T: Scalar>(block: &[T], shift: i32, clip: ClipBounds) -> Vec<i8> {
    let scale = pow2(shift);
    block.iter().map(|v| clip_round(v.as_f64() * scale, clip.min, clip.max) as i8).collect()
}

/// Blockwise-compressed tensor: per-tile codes plus a per-tile shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockQTensor {
    pub shape: Vec<usize>,
    pub grid: BlockGrid,
    pub codec: Codec,
    /// Tile-major codes, padding included (`grid.tile_len()` per tile).
    pub codes: Vec<i8>,
    pub shifts: Vec<i8>,
    pub clip: ClipBounds,
}

impl BlockQTensor {
    /// Blockwise quantization with one shift per `block_size` tile.
    pub fn quantize<T: Scalar>(
        t: &Tensor<T>,
        block_size: usize,
        codec: Codec,
        clip: ClipBounds,
    ) -> Result<Self> {
        let k = codec_bits(codec)?;
        let clip = clip.validate(codec)?;
        let p = partition(t, block_size)?;
        let per_block: Vec<(Vec<i8>, i8)> = p
            .blocks
            .par_iter()
            .map(|b| {
                let shift = compute_shift(b.max_abs(block_size), k);
                (quantize_block(&b.data, shift, clip), shift as i8)
            })
            .collect();
        let mut codes = Vec::with_capacity(p.grid.num_blocks() * p.grid.tile_len());
        let mut shifts = Vec::with_capacity(p.grid.num_blocks());
        for (c, s) in per_block {
            codes.extend(c);
            shifts.push(s);
        }
        Ok(Self { shape: t.shape().to_vec(), grid: p.grid, codec, codes, shifts, clip })
    }

    /// Layerwise baseline: one tile spanning the whole tensor, one shift.
    pub fn quantize_layerwise<T: Scalar>(t: &Tensor<T>, codec: Codec) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        let span = if t.rank() == 1 { cols } else { rows.max(cols) }.max(1);
        Self::quantize(t, span, codec, ClipBounds::full(codec))
    }

    pub fn k(&self) -> u32 {
        codec_bits(self.codec).expect("block tensors carry integer codecs")
    }

    pub fn num_blocks(&self) -> usize {
        self.shifts.len()
    }

    pub fn block_codes(&self, id: usize) -> &[i8] {
        let n = self.grid.tile_len();
        &self.codes[id * n..(id + 1) * n]
    }

    pub fn shift(&self, id: usize) -> i32 {
        self.shifts[id] as i32
    }

    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    /// Code and shift of logical element `(r, c)`.
    #[inline]
    pub fn element(&self, r: usize, c: usize) -> (i8, i32) {
        let (id, off) = self.grid.locate(r, c);
        (self.codes[id * self.grid.tile_len() + off], self.shifts[id] as i32)
    }

    /// Row `r` as `(code, shift)` pairs.
    pub fn row_elements(&self, r: usize) -> Vec<(i64, i32)> {
        (0..self.cols())
            .map(|c| {
                let (v, s) = self.element(r, c);
                (v as i64, s)
            })
            .collect()
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        self.dequantize_as::<f32>()
    }

    pub fn dequantize_as<T: Scalar>(&self) -> Tensor<T> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (v, s) = self.element(r, c);
                data.push(T::of_f64(v as f64 * pow2(-s)));
            }
        }
        Tensor::new(self.shape.clone(), data).expect("dequantized values are finite")
    }

    /// Builds a tensor from per-tile integer values that share a per-tile
    /// shift, re-encoding each tile with a fresh shift.
    pub fn from_tile_values(
        shape: Vec<usize>,
        grid: BlockGrid,
        codec: Codec,
        clip: ClipBounds,
        tiles: &[(Vec<i64>, i32)],
    ) -> Result<Self> {
        let k = codec_bits(codec)?;
        let clip = clip.validate(codec)?;
        if tiles.len() != grid.num_blocks() {
            return Err(BctError::Integrity("tile count does not match grid".into()));
        }
        let mut codes = Vec::with_capacity(grid.num_blocks() * grid.tile_len());
        let mut shifts = Vec::with_capacity(grid.num_blocks());
        for (vals, s) in tiles {
            let (c, ns) = requantize_fixed(vals, *s, k, clip.min, clip.max);
            codes.extend(c);
            shifts.push(ns as i8);
        }
        Ok(Self { shape, grid, codec, codes, shifts, clip })
    }

    /// Builds a tensor from arbitrary per-element `(value, shift)` pairs.
    ///
    /// Each tile aligns its elements onto a common shift and is re-encoded by
    /// the shift rule; when all elements of a tile already share a shift and
    /// fit the codec this is lossless.
    pub fn from_elements(
        shape: Vec<usize>,
        block_size: usize,
        codec: Codec,
        clip: ClipBounds,
        elem: impl Fn(usize, usize) -> (i64, i32) + Sync,
    ) -> Result<Self> {
        let grid = BlockGrid::for_shape(&shape, block_size)?;
        let tiles: Vec<(Vec<i64>, i32)> = (0..grid.num_blocks())
            .into_par_iter()
            .map(|id| {
                let (br, bc) = grid.block_coords(id);
                let (vr, vc) = grid.valid_extent(br, bc);
                let mut items = vec![(0i64, 0i32); grid.tile_len()];
                for r in 0..vr {
                    for c in 0..vc {
                        items[r * block_size + c] =
                            elem(br * grid.tile_rows + r, bc * block_size + c);
                    }
                }
                align_common(&items, 62)
            })
            .collect();
        Self::from_tile_values(shape, grid, codec, clip, &tiles)
    }

    /// Re-encodes into another integer codec / clip / block size.
    pub fn requantize(&self, codec: Codec, clip: ClipBounds, block_size: usize) -> Result<Self> {
        if codec == self.codec && clip == self.clip && block_size == self.grid.block_size {
            return Ok(self.clone());
        }
        Self::from_elements(self.shape.clone(), block_size, codec, clip, |r, c| {
            let (v, s) = self.element(r, c);
            (v as i64, s)
        })
    }

    /// Matrix transpose; square tiles keep their codes and shifts.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(invalid_arg("transpose needs a matrix"));
        }
        let grid = BlockGrid::for_shape(&[self.cols(), self.rows()], self.grid.block_size)?;
        let n = grid.tile_len();
        let bs = grid.block_size;
        let mut codes = vec![0i8; grid.num_blocks() * n];
        let mut shifts = vec![0i8; grid.num_blocks()];
        for br in 0..self.grid.rows_of_blocks {
            for bc in 0..self.grid.cols_of_blocks {
                let src = self.grid.block_id(br, bc);
                let dst = grid.block_id(bc, br);
                shifts[dst] = self.shifts[src];
                let s = self.block_codes(src);
                for r in 0..bs {
                    for c in 0..bs {
                        codes[dst * n + c * bs + r] = s[r * bs + c];
                    }
                }
            }
        }
        Ok(Self { shape: vec![self.cols(), self.rows()], grid, codec: self.codec, codes, shifts, clip: self.clip })
    }

    /// Columns `start..end` as a new tensor (re-tiled).
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols() || self.shape.len() != 2 {
            return Err(invalid_arg(format!("bad column range {start}..{end}")));
        }
        Self::from_elements(vec![self.rows(), end - start], self.grid.block_size, self.codec, self.clip, |r, c| {
            let (v, s) = self.element(r, c + start);
            (v as i64, s)
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[BlockQTensor], codec: Codec, clip: ClipBounds) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid_arg("nothing to concatenate"))?;
        let rows = first.rows();
        if parts.iter().any(|p| p.rows() != rows || p.shape.len() != 2) {
            return Err(invalid_arg("row counts differ"));
        }
        let mut owner = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            owner.extend((0..p.cols()).map(|c| (i, c)));
        }
        Self::from_elements(vec![rows, owner.len()], first.grid.block_size, codec, clip, |r, c| {
            let (i, pc) = owner[c];
            let (v, s) = parts[i].element(r, pc);
            (v as i64, s)
        })
    }
}
