//! Transformer encoder (post-LN, BERT layout) in an fp32 reference mode and in
//! per-site low-bit configurations.

mod compressed;
mod config;
pub mod reference;
mod store;

pub use compressed::{
    calibrate_model, compress_calibrated, compress_model, forward_compressed, forward_compressed_audited,
    residual_add, site_stats, weight_codec, AuditEntry, Calibration, Coded, CompressedLayer, CompressedModel,
};
pub use config::{ClipPolicy, ModelConfig, SiteCodecs, SiteKind, PRESETS};
pub use store::{
    calib_from_records, calib_to_records, calibration_from_records, calibration_to_records, is_compressed, outputs_from_records, outputs_to_records,
    tokens_from_records, tokens_to_record, weights_from_records, weights_to_records,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, BctError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
}

impl Dims {
    /// Small model used throughout the tests: 2 layers, width 64, 4 heads.
    pub fn toy() -> Self {
        Self { vocab: 1000, hidden: 64, heads: 4, ffn: 256, layers: 2 }
    }

    /// BERT-base shapes: 12 layers, width 768, 12 heads, FFN 3072.
    pub fn bert_base() -> Self {
        Self { vocab: 30522, hidden: 768, heads: 12, ffn: 3072, layers: 12 }
    }

    pub fn d_k(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.vocab == 0 {
            return Err(invalid_arg(format!("degenerate dimensions {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(invalid_arg(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar> {
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub o_w: Tensor<T>,
    pub o_b: Tensor<T>,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub ffn1_w: Tensor<T>,
    pub ffn1_b: Tensor<T>,
    pub ffn2_w: Tensor<T>,
    pub ffn2_b: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
}

/// Field names of [`LayerWeights`], in declaration order.
pub const LAYER_TENSORS: [&str; 16] = [
    "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b", "ln1_g", "ln1_b", "ffn1_w", "ffn1_b", "ffn2_w",
    "ffn2_b", "ln2_g", "ln2_b",
];

impl<T: Scalar> LayerWeights<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.q_w, &self.q_b, &self.k_w, &self.k_b, &self.v_w, &self.v_b, &self.o_w, &self.o_b, &self.ln1_g,
            &self.ln1_b, &self.ffn1_w, &self.ffn1_b, &self.ffn2_w, &self.ffn2_b, &self.ln2_g, &self.ln2_b,
        ]
    }

    pub fn from_tensors(t: [Tensor<T>; 16]) -> Self {
        let [q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln1_g, ln1_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b, ln2_g, ln2_b] = t;
        Self { q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln1_g, ln1_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b, ln2_g, ln2_b }
    }

    /// Expected shape of each tensor in [`LAYER_TENSORS`] order.
    pub fn shapes(d: &Dims) -> [Vec<usize>; 16] {
        let (h, f) = (d.hidden, d.ffn);
        [
            vec![h, h], vec![h], vec![h, h], vec![h], vec![h, h], vec![h], vec![h, h], vec![h], vec![h], vec![h],
            vec![f, h], vec![f], vec![h, f], vec![h], vec![h], vec![h],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T: Scalar> {
    pub dims: Dims,
    /// `[vocab, hidden]`.
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// Linear weights and biases uniform in `±1/sqrt(fan_in)`, unit-variance
    /// embeddings, LayerNorm scale near 1 and shift near 0.
    pub fn random(dims: Dims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], bound: f64, center: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::of_f64(center + rng.gen_range(-bound..=bound))).collect();
            Tensor::new(shape.to_vec(), data).expect("finite")
        };
        let embedding = uniform(&[dims.vocab, dims.hidden], 3f64.sqrt(), 0.0);
        let layers = (0..dims.layers)
            .map(|_| {
                let shapes = LayerWeights::<T>::shapes(&dims);
                let t: Vec<Tensor<T>> = shapes
                    .iter()
                    .zip(LAYER_TENSORS)
                    .map(|(s, name)| {
                        if name.starts_with("ln") {
                            let center = if name.ends_with("_g") { 1.0 } else { 0.0 };
                            uniform(s, 0.1, center)
                        } else {
                            let fan_in = if name.ends_with("_w") { s[1] } else { fan_in_of_bias(name, &dims) };
                            uniform(s, 1.0 / (fan_in as f64).sqrt(), 0.0)
                        }
                    })
                    .collect();
                LayerWeights::from_tensors(t.try_into().expect("16 tensors"))
            })
            .collect();
        Ok(Self { dims, embedding, layers })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let layers = (0..dims.layers)
            .map(|_| {
                let t = LayerWeights::<T>::shapes(&dims).map(Tensor::zeros);
                LayerWeights::from_tensors(t)
            })
            .collect();
        Ok(Self { dims, embedding: Tensor::zeros(vec![dims.vocab, dims.hidden]), layers })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.embedding.shape() != [self.dims.vocab, self.dims.hidden] {
            return Err(invalid_arg("embedding table shape does not match the dimensions"));
        }
        if self.layers.len() != self.dims.layers {
            return Err(invalid_arg("layer count does not match the dimensions"));
        }
        let shapes = LayerWeights::<T>::shapes(&self.dims);
        for (l, layer) in self.layers.iter().enumerate() {
            for ((t, s), name) in layer.tensors().iter().zip(&shapes).zip(LAYER_TENSORS) {
                if t.shape() != s.as_slice() {
                    return Err(invalid_arg(format!("layer {l} {name}: shape {:?}, expected {s:?}", t.shape())));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let c = |t: &Tensor<T>| t.map(|v| U::of_f64(v.as_f64()));
        EncoderWeights {
            dims: self.dims,
            embedding: c(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights::from_tensors(l.tensors().map(|t| c(t))))
                .collect(),
        }
    }
}

fn fan_in_of_bias(name: &str, d: &Dims) -> usize {
    if name == "ffn2_b" {
        d.ffn
    } else {
        d.hidden
    }
}

pub(crate) fn check_tokens(dims: &Dims, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(BctError::InvalidInput("empty token sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= dims.vocab) {
        return Err(BctError::InvalidInput(format!("token id {bad} is outside the vocabulary of {}", dims.vocab)));
    }
    Ok(())
}

/// Reference forward pass of one sequence; `hook` sees every site output.
pub fn forward_fp32_hooked<T: Scalar>(
    w: &EncoderWeights<T>,
    ids: &[usize],
    hook: &mut dyn FnMut(usize, SiteKind, &Tensor<T>),
) -> Result<Tensor<T>> {
    check_tokens(&w.dims, ids)?;
    let d = w.dims;
    let mut h = Tensor::from_fn(ids.len(), d.hidden, |r, c| w.embedding.at(ids[r], c));
    hook(0, SiteKind::Embedding, &h);
    for (l, lw) in w.layers.iter().enumerate() {
        let q = reference::linear(&h, &lw.q_w, Some(&lw.q_b));
        hook(l, SiteKind::Query, &q);
        let k = reference::linear(&h, &lw.k_w, Some(&lw.k_b));
        hook(l, SiteKind::Key, &k);
        let v = reference::linear(&h, &lw.v_w, Some(&lw.v_b));
        hook(l, SiteKind::Value, &v);
        let mut heads = Vec::with_capacity(d.heads);
        for head in 0..d.heads {
            let (a, b) = (head * d.d_k(), (head + 1) * d.d_k());
            let (qh, kh, vh) = (reference::slice_cols(&q, a, b), reference::slice_cols(&k, a, b), reference::slice_cols(&v, a, b));
            let scores = reference::linear(&qh, &kh, None);
            hook(l, SiteKind::Scores, &scores);
            let scaled = reference::scale(&scores, d.d_k());
            hook(l, SiteKind::Scaled, &scaled);
            let probs = reference::softmax(&scaled);
            hook(l, SiteKind::Probs, &probs);
            let ctx = reference::linear(&probs, &reference::transpose(&vh), None);
            hook(l, SiteKind::HeadContext, &ctx);
            heads.push(ctx);
        }
        let ctx = reference::concat_cols(&heads);
        let attn = reference::linear(&ctx, &lw.o_w, Some(&lw.o_b));
        hook(l, SiteKind::AttnOut, &attn);
        let res1 = reference::add(&h, &attn);
        hook(l, SiteKind::Residual1, &res1);
        let h1 = reference::layer_norm(&res1, &lw.ln1_g, &lw.ln1_b, DEFAULT_EPS);
        hook(l, SiteKind::Norm1, &h1);
        let f1 = reference::linear(&h1, &lw.ffn1_w, Some(&lw.ffn1_b));
        hook(l, SiteKind::Ffn1, &f1);
        let g = reference::gelu(&f1);
        hook(l, SiteKind::Gelu, &g);
        let f2 = reference::linear(&g, &lw.ffn2_w, Some(&lw.ffn2_b));
        hook(l, SiteKind::Ffn2, &f2);
        let res2 = reference::add(&h1, &f2);
        hook(l, SiteKind::Residual2, &res2);
        h = reference::layer_norm(&res2, &lw.ln2_g, &lw.ln2_b, DEFAULT_EPS);
        hook(l, SiteKind::Norm2, &h);
    }
    Ok(h)
}

/// Reference forward pass of a batch of sequences.
pub fn forward_fp32<T: Scalar>(w: &EncoderWeights<T>, batch: &[Vec<usize>]) -> Result<Vec<Tensor<T>>> {
    batch.par_iter().map(|ids| forward_fp32_hooked(w, ids, &mut |_, _, _| {})).collect()
}

/// Deterministic random token sequences.
pub fn random_tokens(vocab: usize, sequences: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences).map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect()).collect()
}
