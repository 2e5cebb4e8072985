use serde::Serialize;

use crate::error::{invalid_arg, Result};
use crate::formats::Codec;
use crate::quantizer::{BlockQTensor, ClipBounds};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: quantile(&v, 0.0),
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: quantile(&v, 1.0),
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.min, self.q1, self.median, self.q3, self.max]
    }
}

/// Quantile of sorted data, interpolating linearly between the order
/// statistics at `(n - 1) * q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: &'static str,
    pub summary: FiveNumber,
    /// Mean squared error against the original values (0 for the original).
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub schema_version: u32,
    pub block_size: usize,
    pub bits: u32,
    /// Original, blockwise, layerwise.
    pub methods: [MethodSummary; 3],
}

impl DistributionReport {
    pub fn blockwise_mse(&self) -> f64 {
        self.methods[1].mse
    }

    pub fn layerwise_mse(&self) -> f64 {
        self.methods[2].mse
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

/// Compares blockwise and layerwise `k`-bit quantization of `t`.
pub fn distribution_report<T: Scalar>(t: &Tensor<T>, block_size: usize, k: u32) -> Result<DistributionReport> {
    if t.is_empty() {
        return Err(invalid_arg("distribution of an empty tensor"));
    }
    let codec = match k {
        4 => Codec::Int4,
        8 => Codec::Int8,
        _ => return Err(invalid_arg(format!("{k}-bit quantization is not supported; use 4 or 8"))),
    };
    let original: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let block = BlockQTensor::quantize(t, block_size, codec, ClipBounds::full(codec))?.dequantize_as::<f64>();
    let layer = BlockQTensor::quantize_layerwise(t, codec)?.dequantize_as::<f64>();
    Ok(DistributionReport {
        schema_version: SCHEMA_VERSION,
        block_size,
        bits: k,
        methods: [
            MethodSummary { method: "original", summary: FiveNumber::of(&original), mse: 0.0 },
            MethodSummary { method: "blockwise", summary: FiveNumber::of(block.data()), mse: mse(&original, block.data()) },
            MethodSummary { method: "layerwise", summary: FiveNumber::of(layer.data()), mse: mse(&original, layer.data()) },
        ],
    })
}

/// 4x4 matrix with one tile of small values next to three tiles of large
/// ones; with 2x2 blocks the small tile keeps its own, finer shift.
pub fn heterogeneous_example() -> Tensor<f64> {
    Tensor::matrix(
        4,
        4,
        vec![
            0.011, -0.023, 5.1, -3.7, //
            0.037, 0.004, 2.2, 6.3, //
            -4.4, 1.9, 7.4, -0.8, //
            3.3, -6.1, -2.9, 4.6,
        ],
    )
    .expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn uniform_scale_gives_identical_methods() {
        // every 2x2 tile has max 0.75, as does the whole tensor
        let t = Tensor::matrix(4, 4, (0..16).map(|i| [0.75, -0.5, -0.75, 0.125][i % 4]).collect::<Vec<f64>>()).unwrap();
        let r = distribution_report(&t, 2, 8).unwrap();
        assert_eq!(r.methods[1].summary, r.methods[2].summary);
        assert_eq!(r.blockwise_mse(), r.layerwise_mse());
    }

    #[test]
    fn heterogeneous_tiles_favour_blockwise() {
        let t = heterogeneous_example();
        let r = distribution_report(&t, 2, 4).unwrap();
        assert!(r.blockwise_mse() < r.layerwise_mse());
        let orig = r.methods[0].summary.as_array();
        let dist = |m: &MethodSummary| orig.iter().zip(m.summary.as_array()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(dist(&r.methods[1]) < dist(&r.methods[2]));

        // the small tile by hand: max 0.037 -> shift floor(log2(8 / 0.037)) = 7
        let block = BlockQTensor::quantize(&t, 2, Codec::Int4, ClipBounds::full(Codec::Int4)).unwrap();
        assert_eq!(block.shift(0), 7);
        let layer = BlockQTensor::quantize_layerwise(&t, Codec::Int4).unwrap();
        assert_eq!(layer.shifts, vec![0]);
    }

    #[test]
    fn zero_tensor_is_all_zero() {
        let r = distribution_report(&Tensor::<f32>::zeros(vec![3, 5]), 2, 8).unwrap();
        for m in &r.methods {
            assert_eq!(m.summary.as_array(), [0.0; 5]);
            assert_eq!(m.mse, 0.0);
        }
    }
}
