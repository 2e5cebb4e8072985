//! KL-divergence (entropy) calibration of clip bounds.

use serde::{Deserialize, Serialize};

use super::{codec_bits, ClipBounds};
use crate::error::{BctError, Result};
use crate::formats::Codec;
use crate::scalar::Scalar;

pub const HISTOGRAM_BINS: usize = 2048;
/// First candidate threshold, in bins.
pub const SWEEP_START: usize = 128;
const SMOOTHING_EPS: f64 = 1e-4;

/// Histogram of `|x|` over `[0, observed_max]` for one tensor site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub histogram: Vec<u64>,
    pub observed_max: f32,
    /// Chosen bounds, filled in by calibration.
    pub clip: Option<ClipBounds>,
    /// Chosen real-valued threshold, filled in by calibration.
    pub threshold: Option<f32>,
}

impl CalibStats {
    /// Empty histogram covering `[0, observed_max]`.
    pub fn new(observed_max: f32) -> Self {
        Self { histogram: vec![0; HISTOGRAM_BINS], observed_max: observed_max.abs(), clip: None, threshold: None }
    }

    pub fn from_values<T: Scalar>(values: &[T]) -> Self {
        let max = values.iter().fold(0f64, |m, v| m.max(v.as_f64().abs()));
        let mut s = Self::new(max as f32);
        s.accumulate(values);
        s
    }

    pub fn bin_width(&self) -> f64 {
        self.observed_max as f64 / HISTOGRAM_BINS as f64
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().sum()
    }

    /// Adds a batch; magnitudes above `observed_max` land in the last bin.
    pub fn accumulate<T: Scalar>(&mut self, values: &[T]) {
        let w = self.bin_width();
        for v in values {
            let a = v.as_f64().abs();
            let bin = if w > 0.0 { ((a / w) as usize).min(HISTOGRAM_BINS - 1) } else { 0 };
            self.histogram[bin] += 1;
        }
    }

    /// Histogram addition; both sides must cover the same range.
    pub fn merge(&mut self, other: &CalibStats) -> Result<()> {
        if self.observed_max.to_bits() != other.observed_max.to_bits()
            || self.histogram.len() != other.histogram.len()
        {
            return Err(BctError::InvalidCalibration("histogram ranges differ".into()));
        }
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        Ok(())
    }
}

pub(crate) fn smooth(dist: &mut [f64]) -> bool {
    let zeros = dist.iter().filter(|&&p| p == 0.0).count();
    let nonzeros = dist.len() - zeros;
    if nonzeros == 0 {
        return false;
    }
    let take = SMOOTHING_EPS * zeros as f64 / nonzeros as f64;
    for p in dist.iter_mut() {
        if *p == 0.0 {
            *p = SMOOTHING_EPS;
        } else {
            *p -= take;
        }
    }
    dist.iter().all(|&p| p > 0.0)
}

pub(crate) fn normalize(dist: &mut [f64]) -> bool {
    let total: f64 = dist.iter().sum();
    if total <= 0.0 {
        return false;
    }
    dist.iter_mut().for_each(|p| *p /= total);
    true
}

/// KL divergence between the clipped reference histogram and its
/// `levels`-level quantized expansion, for a threshold at bin edge `edge`.
fn candidate_kl(hist: &[u64], edge: usize, levels: usize) -> f64 {
    let mut reference: Vec<f64> = hist[..edge].iter().map(|&c| c as f64).collect();
    let outliers: u64 = hist[edge..].iter().sum();
    reference[edge - 1] += outliers as f64;

    let mut expanded = vec![0f64; edge];
    for j in 0..levels {
        let lo = j * edge / levels;
        let hi = if j + 1 == levels { edge } else { (j + 1) * edge / levels };
        if lo >= hi {
            continue;
        }
        let total: u64 = hist[lo..hi].iter().sum();
        let nonzero = hist[lo..hi].iter().filter(|&&c| c > 0).count();
        if nonzero == 0 {
            continue;
        }
        let share = total as f64 / nonzero as f64;
        for (q, &c) in expanded[lo..hi].iter_mut().zip(&hist[lo..hi]) {
            if c > 0 {
                *q = share;
            }
        }
    }

    if !normalize(&mut reference) || !normalize(&mut expanded) {
        return f64::INFINITY;
    }
    if !smooth(&mut reference) || !smooth(&mut expanded) {
        return f64::INFINITY;
    }
    reference.iter().zip(&expanded).map(|(&p, &q)| p * (p / q).ln()).sum()
}

/// Sweeps bin edges from [`SWEEP_START`] to the full range and returns the
/// threshold (as `(real value, bin edge)`) with the smallest KL divergence.
/// Ties go to the wider threshold.
pub fn kl_threshold(stats: &CalibStats, levels: usize) -> Result<(f64, usize)> {
    if stats.histogram.len() != HISTOGRAM_BINS || stats.total() == 0 {
        return Err(BctError::CalibrationMissing("empty calibration histogram".into()));
    }
    let start = SWEEP_START.max(levels).min(HISTOGRAM_BINS);
    let mut best = (f64::INFINITY, HISTOGRAM_BINS);
    for edge in start..=HISTOGRAM_BINS {
        let kl = candidate_kl(&stats.histogram, edge, levels);
        if kl <= best.0 {
            best = (kl, edge);
        }
    }
    Ok((best.1 as f64 * stats.bin_width(), best.1))
}

/// Chooses `(MIN, MAX)` for `codec` from the KL-optimal threshold.
///
/// `MAX` is the threshold expressed on the `2^(k-1)` code budget relative to
/// the observed maximum, `floor(2^(k-1) * threshold / observed_max)`, limited
/// to the codec range; `MIN = -MAX - 1`.
pub fn calibrate_clip(stats: &CalibStats, codec: Codec) -> Result<ClipBounds> {
    let k = codec_bits(codec)?;
    let levels = 1usize << (k - 1);
    let (_, codec_max) = codec.int_range().expect("integer codec");
    if stats.observed_max == 0.0 {
        if stats.total() == 0 {
            return Err(BctError::CalibrationMissing("empty calibration histogram".into()));
        }
        return Ok(ClipBounds::full(codec));
    }
    let (_, edge) = kl_threshold(stats, levels)?;
    let max = ((levels * edge) / HISTOGRAM_BINS) as i32;
    Ok(ClipBounds::symmetric(max.clamp(1, codec_max)))
}

impl CalibStats {
    /// Runs [`calibrate_clip`] and records the outcome.
    pub fn calibrate(&mut self, codec: Codec) -> Result<ClipBounds> {
        let clip = calibrate_clip(self, codec)?;
        let k = codec_bits(codec)?;
        let threshold = if self.observed_max == 0.0 {
            0.0
        } else {
            kl_threshold(self, 1usize << (k - 1))?.0
        };
        self.clip = Some(clip);
        self.threshold = Some(threshold as f32);
        Ok(clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn empty_histogram_is_missing_calibration() {
        let s = CalibStats::new(1.0);
        assert!(matches!(calibrate_clip(&s, Codec::Int8), Err(BctError::CalibrationMissing(_))));
    }

    #[test]
    fn spike_uses_full_range() {
        let s = CalibStats::from_values(&[0.7f32; 500]);
        assert_eq!(calibrate_clip(&s, Codec::Int8).unwrap(), ClipBounds { min: -128, max: 127 });
        assert_eq!(calibrate_clip(&s, Codec::Int4).unwrap(), ClipBounds { min: -8, max: 7 });
    }

    #[test]
    fn uniform_keeps_threshold_near_max() {
        let values: Vec<f32> = (0..200_000).map(|i| (i as f32 + 0.5) / 200_000.0).collect();
        let s = CalibStats::from_values(&values);
        let (t, _) = kl_threshold(&s, 128).unwrap();
        assert!((s.observed_max as f64 - t).abs() <= s.bin_width() + 1e-12, "{t}");
    }

    #[test]
    fn gaussian_outliers_are_clipped() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let mut values: Vec<f32> = (0..100_000).map(|_| n.sample(&mut rng)).collect();
        values.extend([25.0f32, -30.0, 28.0]);
        let s = CalibStats::from_values(&values);
        let (t, _) = kl_threshold(&s, 128).unwrap();
        assert!(t < s.observed_max as f64);
        let clip = calibrate_clip(&s, Codec::Int8).unwrap();
        assert!(clip.max < 127);
        assert_eq!(clip.min, -clip.max - 1);
    }

    #[test]
    fn merging_is_histogram_addition() {
        let mut a = CalibStats::new(2.0);
        a.accumulate(&[0.1f32, 1.9, 3.0]);
        let mut b = CalibStats::new(2.0);
        b.accumulate(&[0.1f32]);
        a.merge(&b).unwrap();
        assert_eq!(a.total(), 4);
        assert_eq!(a.histogram[HISTOGRAM_BINS - 1], 1);
        assert!(a.merge(&CalibStats::new(1.0)).is_err());
    }
}
