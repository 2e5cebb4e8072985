//! Floating-point kernels shared by the reference forward pass and the
//! fp32 / fp8 sites of the compressed pipeline.

use crate::nonlinear::gelu_f64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x * w^T + b` with `w` stored `[out, in]`.
///
/// Dot products use eight interleaved partial sums, combined pairwise.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (rows, inner) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    debug_assert_eq!(w.shape()[1], inner);
    Tensor::from_fn(rows, out, |r, o| {
        let acc = dot(x.row(r), w.row(o));
        match b {
            Some(b) => acc + b.data()[o],
            None => acc,
        }
    })
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    for (i, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        lanes[i] += x * y;
    }
    let l4 = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (l4[0] + l4[2]) + (l4[1] + l4[3])
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(cols, rows, |r, c| x.at(c, r))
}

pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    Tensor::from_fn(x.shape()[0], end - start, |r, c| x.at(r, start + c))
}

pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let rows = parts[0].shape()[0];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, total, data).expect("concatenated shape")
}

pub fn scale<T: Scalar>(x: &Tensor<T>, d_k: usize) -> Tensor<T> {
    let root = T::of_usize(d_k).sqrt();
    x.map(|v| v / root)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let mut sum = T::zero();
        for &v in &e {
            sum += v;
        }
        data.extend(e.into_iter().map(|v| v / sum));
    }
    Tensor::matrix(rows, cols, data).expect("softmax shape")
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let n = T::of_usize(cols);
    let eps = T::of_f64(eps);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let denom = (var + eps).sqrt();
        for (c, &v) in row.iter().enumerate() {
            data.push((v - mean) / denom * gamma.data()[c] + beta.data()[c]);
        }
    }
    Tensor::matrix(rows, cols, data).expect("layer norm shape")
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::of_f64(gelu_f64(v.as_f64())))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
