//! Dense tensors and square-tile block partitioning.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, BctError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

/// Dense row-major tensor. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = checked_numel(&shape)
            .ok_or_else(|| invalid_arg(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(invalid_arg(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(BctError::InvalidInput(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// `(rows, cols)` of a rank-1 (as a single row) or rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(invalid_arg(format!("expected rank 1 or 2, got shape {s:?}"))),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Tiling of a rank-1 or rank-2 tensor into `block_size` tiles.
///
/// Matrices use square `block_size x block_size` tiles; vectors use
/// `1 x block_size` segments. Remainders are zero-padded at the bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub tile_rows: usize,
    pub rows_of_blocks: usize,
    pub cols_of_blocks: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl BlockGrid {
    pub fn for_shape(shape: &[usize], block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(invalid_arg("block_size must be at least 1"));
        }
        let (rows, cols, tile_rows) = match shape {
            [n] => (1, *n, 1),
            [r, c] => (*r, *c, block_size),
            s => return Err(invalid_arg(format!("block tiling needs rank 1 or 2, got {s:?}"))),
        };
        let rows_of_blocks = rows.div_ceil(tile_rows);
        let cols_of_blocks = cols.div_ceil(block_size);
        Ok(Self {
            block_size,
            rows,
            cols,
            tile_rows,
            rows_of_blocks,
            cols_of_blocks,
            pad_rows: rows_of_blocks * tile_rows - rows,
            pad_cols: cols_of_blocks * block_size - cols,
        })
    }

    pub fn is_vector(&self) -> bool {
        self.tile_rows == 1
    }

    pub fn num_blocks(&self) -> usize {
        self.rows_of_blocks * self.cols_of_blocks
    }

    /// Elements per tile, padding included.
    pub fn tile_len(&self) -> usize {
        self.tile_rows * self.block_size
    }

    pub fn block_id(&self, br: usize, bc: usize) -> usize {
        br * self.cols_of_blocks + bc
    }

    pub fn block_coords(&self, id: usize) -> (usize, usize) {
        (id / self.cols_of_blocks, id % self.cols_of_blocks)
    }

    /// Number of real (unpadded) rows and columns in tile `(br, bc)`.
    pub fn valid_extent(&self, br: usize, bc: usize) -> (usize, usize) {
        let r = (self.rows - br * self.tile_rows).min(self.tile_rows);
        let c = (self.cols - bc * self.block_size).min(self.block_size);
        (r, c)
    }

    /// Tile and in-tile offset of logical element `(r, c)`.
    #[inline]
    pub fn locate(&self, r: usize, c: usize) -> (usize, usize) {
        let br = r / self.tile_rows;
        let bc = c / self.block_size;
        let off = (r % self.tile_rows) * self.block_size + c % self.block_size;
        (self.block_id(br, bc), off)
    }

    pub fn padded_rows(&self) -> usize {
        self.rows + self.pad_rows
    }

    pub fn padded_cols(&self) -> usize {
        self.cols + self.pad_cols
    }
}

/// One tile of a partitioned tensor, row-major, zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub index: (usize, usize),
    pub data: Vec<T>,
    pub valid_rows: usize,
    pub valid_cols: usize,
}

impl<T: Scalar> Block<T> {
    /// Largest magnitude over the real (unpadded) cells.
    pub fn max_abs(&self, block_size: usize) -> T {
        let mut m = T::zero();
        for r in 0..self.valid_rows {
            for v in &self.data[r * block_size..r * block_size + self.valid_cols] {
                m = m.max(v.abs());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T: Scalar> {
    pub grid: BlockGrid,
    pub blocks: Vec<Block<T>>,
}

pub fn partition<T: Scalar>(t: &Tensor<T>, block_size: usize) -> Result<Partition<T>> {
    let grid = BlockGrid::for_shape(t.shape(), block_size)?;
    let cols = grid.cols;
    let mut blocks = Vec::with_capacity(grid.num_blocks());
    for br in 0..grid.rows_of_blocks {
        for bc in 0..grid.cols_of_blocks {
            let (vr, vc) = grid.valid_extent(br, bc);
            let mut data = vec![T::zero(); grid.tile_len()];
            for r in 0..vr {
                let src = (br * grid.tile_rows + r) * cols + bc * block_size;
                data[r * block_size..r * block_size + vc].copy_from_slice(&t.data()[src..src + vc]);
            }
            blocks.push(Block { index: (br, bc), data, valid_rows: vr, valid_cols: vc });
        }
    }
    Ok(Partition { grid, blocks })
}

pub fn reassemble<T: Scalar>(
    blocks: &[Block<T>],
    grid: &BlockGrid,
    original_shape: &[usize],
) -> Result<Tensor<T>> {
    let expected = BlockGrid::for_shape(original_shape, grid.block_size)?;
    if expected != *grid {
        return Err(BctError::Integrity(format!(
            "grid does not match shape {original_shape:?} at block size {}",
            grid.block_size
        )));
    }
    let mut seen = vec![None; grid.num_blocks()];
    for (i, b) in blocks.iter().enumerate() {
        let (br, bc) = b.index;
        if br >= grid.rows_of_blocks || bc >= grid.cols_of_blocks {
            return Err(BctError::Integrity(format!("block index {:?} outside grid", b.index)));
        }
        if b.data.len() != grid.tile_len() {
            return Err(BctError::Integrity(format!("block {:?} has wrong length", b.index)));
        }
        seen[grid.block_id(br, bc)] = Some(i);
    }
    let mut data = vec![T::zero(); grid.rows * grid.cols];
    for br in 0..grid.rows_of_blocks {
        for bc in 0..grid.cols_of_blocks {
            let Some(i) = seen[grid.block_id(br, bc)] else {
                return Err(BctError::Integrity(format!("missing block ({br}, {bc})")));
            };
            let (vr, vc) = grid.valid_extent(br, bc);
            let b = &blocks[i];
            for r in 0..vr {
                let dst = (br * grid.tile_rows + r) * grid.cols + bc * grid.block_size;
                data[dst..dst + vc]
                    .copy_from_slice(&b.data[r * grid.block_size..r * grid.block_size + vc]);
            }
        }
    }
    Tensor::new(original_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: usize, cols: usize) -> Tensor<f32> {
        Tensor::from_fn(rows, cols, |r, c| (r * cols + c) as f32 + 1.0)
    }

    #[test]
    fn four_by_four_with_block_two_gives_two_by_two_grid() {
        let p = partition(&seq(4, 4), 2).unwrap();
        assert_eq!((p.grid.rows_of_blocks, p.grid.cols_of_blocks), (2, 2));
        assert_eq!(p.blocks[1].data, vec![3.0, 4.0, 7.0, 8.0]);
        assert_eq!(p.blocks[2].data, vec![9.0, 10.0, 13.0, 14.0]);
    }

    #[test]
    fn single_block_is_identity() {
        let t = seq(2, 2);
        let p = partition(&t, 2).unwrap();
        assert_eq!(p.blocks.len(), 1);
        assert_eq!(p.blocks[0].data, t.data());
    }

    #[test]
    fn ragged_edges_are_zero_padded() {
        let t = seq(3, 3);
        let p = partition(&t, 2).unwrap();
        assert_eq!((p.grid.pad_rows, p.grid.pad_cols), (1, 1));
        assert_eq!(p.blocks[1].data, vec![3.0, 0.0, 6.0, 0.0]);
        assert_eq!(p.blocks[3].data, vec![9.0, 0.0, 0.0, 0.0]);
        assert_eq!((p.blocks[3].valid_rows, p.blocks[3].valid_cols), (1, 1));
        let back = reassemble(&p.blocks, &p.grid, t.shape()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn vectors_are_cut_into_segments() {
        let t = Tensor::new(vec![5], vec![1.0f32, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = partition(&t, 2).unwrap();
        assert_eq!(p.blocks.len(), 3);
        assert_eq!(p.blocks[2].data, vec![5.0, 0.0]);
        assert_eq!(reassemble(&p.blocks, &p.grid, t.shape()).unwrap(), t);
    }

    #[test]
    fn zero_block_size_is_rejected() {
        assert!(matches!(partition(&seq(2, 2), 0), Err(BctError::InvalidArgument(_))));
    }

    #[test]
    fn missing_block_is_an_integrity_error() {
        let p = partition(&seq(4, 4), 2).unwrap();
        let err = reassemble(&p.blocks[..3], &p.grid, &[4, 4]).unwrap_err();
        assert!(matches!(err, BctError::Integrity(_)));
    }

    #[test]
    fn one_by_one_with_large_block() {
        let t = Tensor::matrix(1, 1, vec![-2.5f32]).unwrap();
        let p = partition(&t, 64).unwrap();
        assert_eq!(p.blocks[0].max_abs(64), 2.5);
        assert_eq!(reassemble(&p.blocks, &p.grid, t.shape()).unwrap(), t);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0f32; 3]).is_err());
    }

    proptest! {
        #[test]
        fn partition_round_trips_bit_exactly(
            rows in 1usize..40, cols in 1usize..40, bs in 1usize..9, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1e3f32..1e3));
            let p = partition(&t, bs).unwrap();
            let back = reassemble(&p.blocks, &p.grid, t.shape()).unwrap();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            for b in &p.blocks {
                for r in 0..p.grid.tile_rows {
                    for c in 0..bs {
                        if r >= b.valid_rows || c >= b.valid_cols {
                            prop_assert_eq!(b.data[r * bs + c], 0.0);
                        }
                    }
                }
            }
        }
    }
}
