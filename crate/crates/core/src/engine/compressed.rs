use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::{ClipPolicy, ModelConfig, SiteCodecs, SiteKind};
use super::{check_tokens, forward_fp32_hooked, reference, Dims, EncoderWeights, LAYER_TENSORS};
use crate::blockmm::{linear_layer, OutputSpec};
use crate::error::{invalid_arg, BctError, Result};
use crate::fixed::align_common;
use crate::formats::{Codec, Fp8Tensor};
use crate::nonlinear::{self, exp_lut_for_range, gelu_lut_for_range, sqrt_lut, Lut256};
use crate::quantizer::{BlockQTensor, CalibStats, ClipBounds};
use crate::tensor::Tensor;

/// A tensor in one of the three storage forms.
#[derive(Debug, Clone, PartialEq)]
pub enum Coded {
    Fp32(Tensor<f32>),
    Block(BlockQTensor),
    Fp8(Fp8Tensor),
}

impl Coded {
    pub fn encode(t: &Tensor<f32>, codec: Codec, block_size: usize, clip: ClipBounds) -> Result<Self> {
        Ok(match codec {
            Codec::Fp32 => Coded::Fp32(t.clone()),
            Codec::Int4 | Codec::Int8 => Coded::Block(BlockQTensor::quantize(t, block_size, codec, clip)?),
            Codec::Fp8E4M3 | Codec::Fp8E5M2 => {
                Coded::Fp8(Fp8Tensor::encode(t, codec.fp8_format().expect("fp8 codec")))
            }
        })
    }

    pub fn codec(&self) -> Codec {
        match self {
            Coded::Fp32(_) => Codec::Fp32,
            Coded::Block(q) => q.codec,
            Coded::Fp8(t) => t.codec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Coded::Fp32(t) => t.shape(),
            Coded::Block(q) => &q.shape,
            Coded::Fp8(t) => &t.shape,
        }
    }

    pub fn to_f32(&self) -> Cow<'_, Tensor<f32>> {
        match self {
            Coded::Fp32(t) => Cow::Borrowed(t),
            Coded::Block(q) => Cow::Owned(q.dequantize()),
            Coded::Fp8(t) => Cow::Owned(t.decode()),
        }
    }
}

/// One audit line: the codec that a site's output actually carried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub site: String,
    pub kind: SiteKind,
    pub expected: Codec,
    pub actual: Codec,
}

impl AuditEntry {
    /// A low-bit site whose output crossed as fp32, or a codec mismatch.
    pub fn is_violation(&self) -> bool {
        self.expected != self.actual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    /// In [`LAYER_TENSORS`] order.
    pub tensors: Vec<Coded>,
    pub exp_lut: Lut256,
    pub gelu_lut: Lut256,
}

impl CompressedLayer {
    fn get(&self, name: &str) -> &Coded {
        let i = LAYER_TENSORS.iter().position(|n| *n == name).expect("known tensor name");
        &self.tensors[i]
    }
}

/// Immutable result of [`compress_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub dims: Dims,
    pub embedding: Coded,
    pub layers: Vec<CompressedLayer>,
    pub sqrt_lut: Lut256,
    /// Per-site histograms from the calibration run, keyed by site label;
    /// clip bounds are filled in under [`ClipPolicy::Calibrated`].
    pub calib: BTreeMap<String, CalibStats>,
}

impl CompressedModel {
    fn out_spec(&self, label: &str, codec: Codec) -> OutputSpec {
        if self.config.clip_policy == ClipPolicy::Calibrated && codec.is_int() {
            if let Some(clip) = self.calib.get(label).and_then(|s| s.clip) {
                return OutputSpec { codec, clip };
            }
        }
        OutputSpec::full(codec)
    }

    fn encode(&self, t: &Tensor<f32>, codec: Codec, label: &str) -> Result<Coded> {
        Coded::encode(t, codec, self.config.block_size, self.out_spec(label, codec).clip)
    }

    fn as_block<'a>(&self, x: &'a Coded, codec: Codec) -> Result<Cow<'a, BlockQTensor>> {
        match x {
            Coded::Block(q) if q.grid.block_size == self.config.block_size => Ok(Cow::Borrowed(q)),
            Coded::Block(q) => Ok(Cow::Owned(q.requantize(q.codec, q.clip, self.config.block_size)?)),
            other => {
                let codec = if codec.is_int() { codec } else { Codec::Int8 };
                Ok(Cow::Owned(BlockQTensor::quantize(&other.to_f32(), self.config.block_size, codec, ClipBounds::full(codec))?))
            }
        }
    }

    /// Batch inference; see [`forward_compressed`].
    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        forward_compressed(self, batch)
    }
}

/// Storage codec of a layer tensor named as in [`LAYER_TENSORS`].
pub fn weight_codec(name: &str, cfg: &ModelConfig) -> Codec {
    let s = match name {
        n if n.starts_with("ln") => cfg.layernorm,
        n if n.starts_with("ffn") => cfg.ffn,
        _ => cfg.linear,
    };
    if name.ends_with("_w") || name.ends_with("_g") {
        s.w
    } else {
        s.b
    }
}

struct SiteValues {
    values: BTreeMap<String, Vec<f32>>,
    exp_range: Vec<f64>,
    gelu_range: Vec<f64>,
}

fn collect_site_values(w: &EncoderWeights<f32>, inputs: &[Vec<usize>]) -> Result<SiteValues> {
    let per_seq: Vec<SiteValues> = inputs
        .par_iter()
        .map(|ids| {
            let mut sv = SiteValues {
                values: BTreeMap::new(),
                exp_range: vec![0.0; w.dims.layers],
                gelu_range: vec![0.0; w.dims.layers],
            };
            forward_fp32_hooked(w, ids, &mut |l, kind, t| {
                sv.values.entry(kind.label(l)).or_default().extend_from_slice(t.data());
                match kind {
                    SiteKind::Scaled => {
                        for r in 0..t.shape()[0] {
                            let row = t.row(r);
                            let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
                            sv.exp_range[l] = sv.exp_range[l].max((hi - lo) as f64);
                        }
                    }
                    SiteKind::Ffn1 => sv.gelu_range[l] = sv.gelu_range[l].max(t.max_abs() as f64),
                    _ => {}
                }
            })?;
            Ok(sv)
        })
        .collect::<Result<_>>()?;
    let mut all = SiteValues {
        values: BTreeMap::new(),
        exp_range: vec![0.0; w.dims.layers],
        gelu_range: vec![0.0; w.dims.layers],
    };
    for sv in per_seq {
        for (k, v) in sv.values {
            all.values.entry(k).or_default().extend(v);
        }
        for l in 0..w.dims.layers {
            all.exp_range[l] = all.exp_range[l].max(sv.exp_range[l]);
            all.gelu_range[l] = all.gelu_range[l].max(sv.gelu_range[l]);
        }
    }
    Ok(all)
}

/// Activation statistics of a reference run: per-site histograms and the
/// input ranges of the exp and GELU tables of each layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Calibration {
    pub sites: BTreeMap<String, CalibStats>,
    pub exp_range: Vec<f64>,
    pub gelu_range: Vec<f64>,
}

impl Calibration {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// Runs the fp32 reference over `inputs` and histograms every site.
pub fn calibrate_model(weights: &EncoderWeights<f32>, inputs: &[Vec<usize>]) -> Result<Calibration> {
    weights.validate()?;
    if inputs.is_empty() {
        return Ok(Calibration {
            sites: BTreeMap::new(),
            exp_range: vec![0.0; weights.dims.layers],
            gelu_range: vec![0.0; weights.dims.layers],
        });
    }
    let sv = collect_site_values(weights, inputs)?;
    let sites = sv.values.into_par_iter().map(|(label, v)| (label, CalibStats::from_values(&v))).collect();
    Ok(Calibration { sites, exp_range: sv.exp_range, gelu_range: sv.gelu_range })
}

/// Site statistics kept for `config`, with clip bounds searched for integer
/// sites under [`ClipPolicy::Calibrated`].
pub fn site_stats(calib: &Calibration, config: &ModelConfig, layers: usize) -> Result<BTreeMap<String, CalibStats>> {
    let mut picked = BTreeMap::new();
    for l in 0..layers.max(1) {
        for kind in SiteKind::ALL {
            let label = kind.label(l);
            let codec = config.site_codec(kind);
            if picked.contains_key(&label) || codec == Codec::Fp32 {
                continue;
            }
            let Some(stats) = calib.sites.get(&label) else { continue };
            picked.insert(label, (codec, stats.clone()));
        }
    }
    let calibrated = config.clip_policy == ClipPolicy::Calibrated;
    picked
        .into_par_iter()
        .map(|(label, (codec, mut stats))| {
            stats.clip = None;
            stats.threshold = None;
            if calibrated && codec.is_int() && stats.total() > 0 && stats.observed_max > 0.0 {
                stats.calibrate(codec)?;
            }
            Ok((label, stats))
        })
        .collect()
}

/// Quantizes weights per `config` and calibrates activation statistics and
/// lookup tables from a reference run over `calib_inputs`.
pub fn compress_model(
    weights: &EncoderWeights<f32>,
    config: &ModelConfig,
    calib_inputs: &[Vec<usize>],
) -> Result<CompressedModel> {
    config.validate()?;
    weights.validate()?;
    if config.needs_calibration() && calib_inputs.is_empty() {
        return Err(missing(config));
    }
    compress_calibrated(weights, config, &calibrate_model(weights, calib_inputs)?)
}

fn missing(config: &ModelConfig) -> BctError {
    BctError::CalibrationMissing(format!(
        "configuration {:?} has low-bit activation sites but no calibration inputs",
        config.name
    ))
}

/// [`compress_model`] from precomputed statistics.
pub fn compress_calibrated(
    weights: &EncoderWeights<f32>,
    config: &ModelConfig,
    calibration: &Calibration,
) -> Result<CompressedModel> {
    config.validate()?;
    weights.validate()?;
    let dims = weights.dims;
    if config.needs_calibration() && calibration.is_empty() {
        return Err(missing(config));
    }
    if calibration.exp_range.len() != dims.layers || calibration.gelu_range.len() != dims.layers {
        return Err(BctError::InvalidCalibration(format!("calibration covers a different layer count than {dims:?}")));
    }
    let calib = site_stats(calibration, config, dims.layers)?;
    let sv = calibration;

    let bs = config.block_size;
    let embedding = Coded::encode(&weights.embedding, config.embedding.w, bs, ClipBounds::full(config.embedding.w))?;
    let layers = weights
        .layers
        .iter()
        .enumerate()
        .map(|(l, lw)| {
            let tensors = lw
                .tensors()
                .iter()
                .zip(LAYER_TENSORS)
                .map(|(t, name)| {
                    let codec = weight_codec(name, config);
                    Coded::encode(t, codec, bs, ClipBounds::full(codec))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CompressedLayer { tensors, exp_lut: exp_lut_for_range(sv.exp_range[l]), gelu_lut: gelu_lut_for_range(sv.gelu_range[l]) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressedModel { config: config.clone(), dims, embedding, layers, sqrt_lut: sqrt_lut(), calib })
}

/// Shift-aligned integer addition, re-encoded per output tile.
pub fn residual_add(a: &BlockQTensor, b: &BlockQTensor, out: OutputSpec) -> Result<BlockQTensor> {
    if a.shape != b.shape {
        return Err(invalid_arg(format!("residual shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    BlockQTensor::from_elements(a.shape.clone(), a.grid.block_size, out.codec, out.clip, |r, c| {
        let (x, sx) = a.element(r, c);
        let (y, sy) = b.element(r, c);
        let (v, s) = align_common(&[(x as i64, sx), (y as i64, sy)], 30);
        (v[0] + v[1], s)
    })
}

struct Run<'a> {
    cm: &'a CompressedModel,
    audit: Vec<AuditEntry>,
}

impl Run<'_> {
    fn record(&mut self, layer: usize, kind: SiteKind, x: Coded) -> Coded {
        self.audit.push(AuditEntry {
            site: kind.label(layer),
            kind,
            expected: self.cm.config.site_codec(kind),
            actual: x.codec(),
        });
        x
    }

    fn linear(&self, x: &Coded, w: &Coded, b: &Coded, site: SiteCodecs, label: &str) -> Result<Coded> {
        let cm = self.cm;
        if let Coded::Block(wq) = w {
            let xq = cm.as_block(x, site.i)?;
            let bq = cm.as_block(b, site.b)?;
            return Ok(Coded::Block(linear_layer(&xq, wq, Some(&bq), cm.out_spec(label, site.i))?));
        }
        let y = reference::linear(&x.to_f32(), &w.to_f32(), Some(&b.to_f32()));
        cm.encode(&y, site.i, label)
    }

    /// `a * b^T` at a matmul site.
    fn matmul_nt(&self, a: &Coded, b: &Coded, label: &str) -> Result<Coded> {
        let cm = self.cm;
        let codec = cm.config.matmul;
        if codec.is_int() {
            let (aq, bq) = (cm.as_block(a, codec)?, cm.as_block(b, codec)?);
            return Ok(Coded::Block(linear_layer(&aq, &bq, None, cm.out_spec(label, codec))?));
        }
        cm.encode(&reference::linear(&a.to_f32(), &b.to_f32(), None), codec, label)
    }

    fn attention(&mut self, l: usize, q: &Coded, k: &Coded, v: &Coded) -> Result<Coded> {
        let cm = self.cm;
        let d = cm.dims;
        let mm = cm.config.matmul;
        let mut heads = Vec::with_capacity(d.heads);
        for head in 0..d.heads {
            let (a, b) = (head * d.d_k(), (head + 1) * d.d_k());
            let (qh, kh, vt) = (slice_cols(q, a, b)?, slice_cols(k, a, b)?, transpose(&slice_cols(v, a, b)?)?);
            let scores = self.matmul_nt(&qh, &kh, &SiteKind::Scores.label(l))?;
            let scores = self.record(l, SiteKind::Scores, scores);
            let label = SiteKind::Scaled.label(l);
            let scaled = if mm.is_int() {
                let s = cm.as_block(&scores, mm)?;
                Coded::Block(nonlinear::attention_scale(&s, d.d_k(), &cm.sqrt_lut, cm.out_spec(&label, mm))?)
            } else {
                cm.encode(&reference::scale(&scores.to_f32(), d.d_k()), mm, &label)?
            };
            let scaled = self.record(l, SiteKind::Scaled, scaled);
            let sm = cm.config.softmax;
            let label = SiteKind::Probs.label(l);
            let probs = if sm.is_int() {
                let s = cm.as_block(&scaled, sm)?;
                Coded::Block(nonlinear::softmax(&s, &cm.layers[l].exp_lut, cm.out_spec(&label, sm))?.tensor)
            } else {
                cm.encode(&reference::softmax(&scaled.to_f32()), sm, &label)?
            };
            let probs = self.record(l, SiteKind::Probs, probs);
            let ctx = self.matmul_nt(&probs, &vt, &SiteKind::HeadContext.label(l))?;
            heads.push(self.record(l, SiteKind::HeadContext, ctx));
        }
        concat_cols(cm, &heads, mm, &SiteKind::HeadContext.label(l))
    }

    fn residual(&self, a: &Coded, b: &Coded, codec: Codec, label: &str) -> Result<Coded> {
        let cm = self.cm;
        if codec.is_int() {
            let (aq, bq) = (cm.as_block(a, codec)?, cm.as_block(b, codec)?);
            return Ok(Coded::Block(residual_add(&aq, &bq, cm.out_spec(label, codec))?));
        }
        cm.encode(&reference::add(&a.to_f32(), &b.to_f32()), codec, label)
    }

    fn layer_norm(&self, x: &Coded, g: &Coded, b: &Coded, label: &str) -> Result<Coded> {
        let cm = self.cm;
        let site = cm.config.layernorm;
        if site.i.is_int() {
            let (xq, gq, bq) = (cm.as_block(x, site.i)?, cm.as_block(g, site.w)?, cm.as_block(b, site.b)?);
            let y = nonlinear::layer_norm(&xq, &gq, &bq, &cm.sqrt_lut, cm.config.eps, cm.out_spec(label, site.i))?;
            return Ok(Coded::Block(y.tensor));
        }
        let y = reference::layer_norm(&x.to_f32(), &g.to_f32(), &b.to_f32(), cm.config.eps);
        cm.encode(&y, site.i, label)
    }

    fn gelu(&self, x: &Coded, lut: &Lut256, label: &str) -> Result<Coded> {
        let cm = self.cm;
        let codec = cm.config.gelu;
        if codec.is_int() {
            let xq = cm.as_block(x, codec)?;
            return Ok(Coded::Block(nonlinear::gelu(&xq, lut, cm.out_spec(label, codec))?));
        }
        cm.encode(&reference::gelu(&x.to_f32()), codec, label)
    }

    fn embed(&self, ids: &[usize]) -> Result<Coded> {
        let cm = self.cm;
        let codec = cm.config.embedding.i;
        let label = SiteKind::Embedding.label(0);
        match &cm.embedding {
            Coded::Block(table) if codec.is_int() => {
                let spec = cm.out_spec(&label, codec);
                let rows = BlockQTensor::from_elements(vec![ids.len(), cm.dims.hidden], cm.config.block_size, codec, spec.clip, |r, c| {
                    let (v, s) = table.element(ids[r], c);
                    (v as i64, s)
                })?;
                Ok(Coded::Block(rows))
            }
            table => {
                let t = table.to_f32();
                let g = Tensor::from_fn(ids.len(), cm.dims.hidden, |r, c| t.at(ids[r], c));
                cm.encode(&g, codec, &label)
            }
        }
    }

    fn sequence(&mut self, ids: &[usize]) -> Result<Tensor<f32>> {
        let cm = self.cm;
        check_tokens(&cm.dims, ids)?;
        let cfg = &cm.config;
        let x = self.embed(ids)?;
        let mut h = self.record(0, SiteKind::Embedding, x);
        for (l, lw) in cm.layers.iter().enumerate() {
            let lab = |k: SiteKind| k.label(l);
            let q = self.linear(&h, lw.get("q_w"), lw.get("q_b"), cfg.linear, &lab(SiteKind::Query))?;
            let q = self.record(l, SiteKind::Query, q);
            let k = self.linear(&h, lw.get("k_w"), lw.get("k_b"), cfg.linear, &lab(SiteKind::Key))?;
            let k = self.record(l, SiteKind::Key, k);
            let v = self.linear(&h, lw.get("v_w"), lw.get("v_b"), cfg.linear, &lab(SiteKind::Value))?;
            let v = self.record(l, SiteKind::Value, v);
            let ctx = self.attention(l, &q, &k, &v)?;
            let attn = self.linear(&ctx, lw.get("o_w"), lw.get("o_b"), cfg.linear, &lab(SiteKind::AttnOut))?;
            let attn = self.record(l, SiteKind::AttnOut, attn);
            let res1 = self.residual(&h, &attn, cfg.linear.i, &lab(SiteKind::Residual1))?;
            let res1 = self.record(l, SiteKind::Residual1, res1);
            let h1 = self.layer_norm(&res1, lw.get("ln1_g"), lw.get("ln1_b"), &lab(SiteKind::Norm1))?;
            let h1 = self.record(l, SiteKind::Norm1, h1);
            let f1 = self.linear(&h1, lw.get("ffn1_w"), lw.get("ffn1_b"), cfg.ffn, &lab(SiteKind::Ffn1))?;
            let f1 = self.record(l, SiteKind::Ffn1, f1);
            let g = self.gelu(&f1, &lw.gelu_lut, &lab(SiteKind::Gelu))?;
            let g = self.record(l, SiteKind::Gelu, g);
            let f2 = self.linear(&g, lw.get("ffn2_w"), lw.get("ffn2_b"), cfg.ffn, &lab(SiteKind::Ffn2))?;
            let f2 = self.record(l, SiteKind::Ffn2, f2);
            let res2 = self.residual(&h1, &f2, cfg.ffn.i, &lab(SiteKind::Residual2))?;
            let res2 = self.record(l, SiteKind::Residual2, res2);
            let out = self.layer_norm(&res2, lw.get("ln2_g"), lw.get("ln2_b"), &lab(SiteKind::Norm2))?;
            h = self.record(l, SiteKind::Norm2, out);
        }
        Ok(h.to_f32().into_owned())
    }
}

fn slice_cols(x: &Coded, a: usize, b: usize) -> Result<Coded> {
    Ok(match x {
        Coded::Fp32(t) => Coded::Fp32(reference::slice_cols(t, a, b)),
        Coded::Block(q) => Coded::Block(q.slice_cols(a, b)?),
        Coded::Fp8(t) => {
            let cols = t.shape[1];
            let codes = (0..t.shape[0]).flat_map(|r| t.codes[r * cols + a..r * cols + b].iter().copied()).collect();
            Coded::Fp8(Fp8Tensor { shape: vec![t.shape[0], b - a], format: t.format, codes })
        }
    })
}

fn transpose(x: &Coded) -> Result<Coded> {
    Ok(match x {
        Coded::Fp32(t) => Coded::Fp32(reference::transpose(t)),
        Coded::Block(q) => Coded::Block(q.transpose()?),
        Coded::Fp8(t) => {
            let (rows, cols) = (t.shape[0], t.shape[1]);
            let codes = (0..cols).flat_map(|c| (0..rows).map(move |r| (r, c))).map(|(r, c)| t.codes[r * cols + c]).collect();
            Coded::Fp8(Fp8Tensor { shape: vec![cols, rows], format: t.format, codes })
        }
    })
}

fn concat_cols(cm: &CompressedModel, parts: &[Coded], codec: Codec, label: &str) -> Result<Coded> {
    if codec.is_int() {
        let blocks = parts.iter().map(|p| cm.as_block(p, codec)).collect::<Result<Vec<_>>>()?;
        let owned: Vec<BlockQTensor> = blocks.into_iter().map(Cow::into_owned).collect();
        return Ok(Coded::Block(BlockQTensor::concat_cols(&owned, codec, cm.out_spec(label, codec).clip)?));
    }
    let fp8: Vec<&Fp8Tensor> = parts.iter().filter_map(|p| if let Coded::Fp8(t) = p { Some(t) } else { None }).collect();
    if codec.is_fp8() && fp8.len() == parts.len() && parts.iter().all(|p| p.codec() == codec) {
        let ts = fp8;
        let rows = ts[0].shape[0];
        let mut codes = Vec::new();
        for r in 0..rows {
            for t in &ts {
                let cols = t.shape[1];
                codes.extend_from_slice(&t.codes[r * cols..(r + 1) * cols]);
            }
        }
        let width = ts.iter().map(|t| t.shape[1]).sum();
        return Ok(Coded::Fp8(Fp8Tensor { shape: vec![rows, width], format: ts[0].format, codes }));
    }
    let f: Vec<Tensor<f32>> = parts.iter().map(|p| p.to_f32().into_owned()).collect();
    cm.encode(&reference::concat_cols(&f), codec, label)
}

/// Low-bit inference of a batch; outputs are dequantized only at the end.
pub fn forward_compressed(cm: &CompressedModel, batch: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    batch.par_iter().map(|ids| forward_compressed_audited(cm, ids).map(|(t, _)| t)).collect()
}

/// One sequence with the codec of every site output recorded.
pub fn forward_compressed_audited(cm: &CompressedModel, ids: &[usize]) -> Result<(Tensor<f32>, Vec<AuditEntry>)> {
    let mut run = Run { cm, audit: Vec::new() };
    let out = run.sequence(ids)?;
    Ok((out, run.audit))
}
