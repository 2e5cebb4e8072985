use serde::Serialize;

use crate::error::{invalid_arg, Result};
use crate::quantizer::{normalize, smooth, HISTOGRAM_BINS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fidelity {
    pub cosine: f64,
    pub mse: f64,
    pub max_abs_err: f64,
    /// `KL(reference || candidate)` over 2048-bin value histograms.
    pub kl: f64,
}

/// Cosine of two flat vectors, clamped to [-1, 1]; 1 when both are zero, 0
/// when only one is.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// Histograms both tensors over their joint range and returns the smoothed
/// KL divergence; 0 when all values coincide.
pub fn histogram_kl<T: Scalar>(reference: &[T], candidate: &[T]) -> f64 {
    let all = reference.iter().chain(candidate).map(|v| v.as_f64());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return 0.0;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let hist = |xs: &[T]| {
        let mut h = vec![0f64; HISTOGRAM_BINS];
        for v in xs {
            let bin = (((v.as_f64() - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            h[bin] += 1.0;
        }
        h
    };
    let (mut p, mut q) = (hist(reference), hist(candidate));
    if !normalize(&mut p) || !normalize(&mut q) || !smooth(&mut p) || !smooth(&mut q) {
        return f64::INFINITY;
    }
    p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum()
}

pub fn fidelity_metrics<T: Scalar>(reference: &Tensor<T>, candidate: &Tensor<T>) -> Result<Fidelity> {
    if reference.shape() != candidate.shape() {
        return Err(invalid_arg(format!(
            "shapes differ: {:?} vs {:?}",
            reference.shape(),
            candidate.shape()
        )));
    }
    let (r, c) = (reference.data(), candidate.data());
    let n = r.len().max(1) as f64;
    let mut sq = 0.0;
    let mut max_abs_err = 0f64;
    for (&x, &y) in r.iter().zip(c) {
        let d = x.as_f64() - y.as_f64();
        sq += d * d;
        max_abs_err = max_abs_err.max(d.abs());
    }
    Ok(Fidelity { cosine: cosine(r, c), mse: sq / n, max_abs_err, kl: histogram_kl(r, c) })
}

/// Mean and minimum of the row-wise cosine over paired `[tokens, hidden]`
/// outputs.
pub fn token_cosines(reference: &[Tensor<f32>], candidate: &[Tensor<f32>]) -> Result<(f64, f64)> {
    if reference.len() != candidate.len() {
        return Err(invalid_arg("output counts differ"));
    }
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut n = 0usize;
    for (a, b) in reference.iter().zip(candidate) {
        if a.shape() != b.shape() {
            return Err(invalid_arg(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let (rows, _) = a.dims2()?;
        for t in 0..rows {
            let c = cosine(a.row(t), b.row(t));
            sum += c;
            min = min.min(c);
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid_arg("no tokens to compare"));
    }
    Ok((sum / n as f64, min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_and_negated() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let m = fidelity_metrics(&t, &t).unwrap();
        assert_eq!(m.cosine, 1.0);
        assert_eq!((m.mse, m.max_abs_err, m.kl), (0.0, 0.0, 0.0));
        let neg = t.map(|v| -v);
        assert_eq!(fidelity_metrics(&t, &neg).unwrap().cosine, -1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(vec![2, 2]);
        let b = Tensor::<f32>::zeros(vec![4]);
        assert!(fidelity_metrics(&a, &b).is_err());
    }

    #[test]
    fn random_pair_matches_f64_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..400);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
            let m = fidelity_metrics(&Tensor::new(vec![n], a.clone()).unwrap(), &Tensor::new(vec![n], b.clone()).unwrap())
                .unwrap();

            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
            let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!((m.cosine - dot / (na * nb)).abs() <= 1e-12);
            assert!((m.mse - mse).abs() <= 1e-12);
            assert!((m.max_abs_err - max).abs() <= 1e-12);

            // histogram KL with explicit smoothing
            let lo = a.iter().chain(&b).cloned().fold(f64::INFINITY, f64::min);
            let hi = a.iter().chain(&b).cloned().fold(f64::NEG_INFINITY, f64::max);
            let bins = |xs: &[f64]| {
                let mut h = vec![0.0; 2048];
                for x in xs {
                    let i = (((x - lo) / ((hi - lo) / 2048.0)) as usize).min(2047);
                    h[i] += 1.0 / n as f64;
                }
                let zeros = h.iter().filter(|&&v| v == 0.0).count() as f64;
                let take = 1e-4 * zeros / (2048.0 - zeros);
                h.iter().map(|&v| if v == 0.0 { 1e-4 } else { v - take }).collect::<Vec<_>>()
            };
            let (p, q) = (bins(&a), bins(&b));
            let kl: f64 = p.iter().zip(&q).map(|(x, y)| x * (x / y).ln()).sum();
            assert!((m.kl - kl).abs() <= 1e-12 * kl.abs().max(1.0), "{} vs {kl}", m.kl);
        }
    }

    #[test]
    fn zero_vectors() {
        assert_eq!(cosine::<f32>(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine::<f32>(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
