use serde::Serialize;

use crate::engine::{weight_codec, Coded, CompressedModel, Dims, LayerWeights, ModelConfig, LAYER_TENSORS};
use crate::error::Result;
use crate::formats::Codec;
use crate::quantizer::ClipBounds;
use crate::tensor::BlockGrid;

use super::SCHEMA_VERSION;

/// Compression ratio quoted for BCT_int4/8 on BERT-base.
pub const PAPER_INT4_8_RATIO: f64 = 7.988;
/// Bits in one block shift.
pub const SHIFT_BITS: u64 = 8;
/// Bits for a stored clip pair that differs from the codec range.
pub const CLIP_BITS: u64 = 16;

/// One tensor to account for.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub codec: Codec,
    /// `true` when the tensor uses the codec's full code range.
    pub full_clip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SiteBits {
    pub name: String,
    pub shape: Vec<usize>,
    pub codec: Codec,
    pub original_bits: u64,
    pub code_bits: u64,
    pub shift_bits: u64,
    pub clip_bits: u64,
}

impl SiteBits {
    pub fn compressed_bits(&self) -> u64 {
        self.code_bits + self.shift_bits + self.clip_bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub schema_version: u32,
    pub config: String,
    pub block_size: usize,
    pub sites: Vec<SiteBits>,
    pub original_bits: u64,
    pub compressed_bits: u64,
    pub ratio: f64,
    /// Published BCT_int4/8 figure, for comparison.
    pub reference_ratio: f64,
    pub assumptions: Vec<String>,
}

/// Bits of one site under the container layout.
///
/// Block codecs store every code of every tile (padding included; int4 packed
/// two per byte) plus one 8-bit shift per tile. fp8 stores one byte per
/// element, fp32 four.
pub fn site_bits(site: &SiteSpec, block_size: usize) -> Result<SiteBits> {
    let elements: u64 = site.shape.iter().map(|&d| d as u64).product();
    let (code_bits, shift_bits, clip_bits) = match site.codec {
        Codec::Int4 | Codec::Int8 => {
            let grid = BlockGrid::for_shape(&site.shape, block_size)?;
            let stored = (grid.num_blocks() * grid.tile_len()) as u64;
            let code_bits = if site.codec == Codec::Int4 { stored.div_ceil(2) * 8 } else { stored * 8 };
            let clip = if site.full_clip { 0 } else { CLIP_BITS };
            (code_bits, grid.num_blocks() as u64 * SHIFT_BITS, clip)
        }
        Codec::Fp8E4M3 | Codec::Fp8E5M2 => (elements * 8, 0, 0),
        Codec::Fp32 => (elements * 32, 0, 0),
    };
    Ok(SiteBits {
        name: site.name.clone(),
        shape: site.shape.clone(),
        codec: site.codec,
        original_bits: elements * 32,
        code_bits,
        shift_bits,
        clip_bits,
    })
}

/// Ratio of fp32 bits to compressed bits over `sites`.
pub fn compression_ratio(sites: &[SiteSpec], config: &str, block_size: usize) -> Result<RatioReport> {
    let sites = sites.iter().map(|s| site_bits(s, block_size)).collect::<Result<Vec<_>>>()?;
    let original_bits = sites.iter().map(|s| s.original_bits).sum();
    let compressed_bits: u64 = sites.iter().map(SiteBits::compressed_bits).sum();
    let ratio = if compressed_bits == 0 { 1.0 } else { original_bits as f64 / compressed_bits as f64 };
    Ok(RatioReport {
        schema_version: SCHEMA_VERSION,
        config: config.to_string(),
        block_size,
        sites,
        original_bits,
        compressed_bits,
        ratio,
        reference_ratio: PAPER_INT4_8_RATIO,
        assumptions: vec![
            "weights, biases and LayerNorm parameters of every encoder layer are counted".into(),
            "block codes are counted as stored, padding included; int4 packs two codes per byte".into(),
            "each block carries one 8-bit shift; a non-default clip pair adds 16 bits per tensor".into(),
            "container headers, record names and LUTs are not counted".into(),
        ],
    })
}

/// Weight sites of an encoder under `config`; the embedding table is
/// included only on request.
pub fn encoder_sites(dims: &Dims, config: &ModelConfig, include_embedding: bool) -> Vec<SiteSpec> {
    let mut out = Vec::new();
    if include_embedding {
        out.push(SiteSpec {
            name: "embedding".into(),
            shape: vec![dims.vocab, dims.hidden],
            codec: config.embedding.w,
            full_clip: true,
        });
    }
    let shapes = LayerWeights::<f32>::shapes(dims);
    for l in 0..dims.layers {
        for (name, shape) in LAYER_TENSORS.iter().zip(&shapes) {
            out.push(SiteSpec {
                name: format!("layer{l}.{name}"),
                shape: shape.clone(),
                codec: weight_codec(name, config),
                full_clip: true,
            });
        }
    }
    out
}

/// Sites of an actual compressed model, read from its stored tensors.
pub fn model_sites(cm: &CompressedModel, include_embedding: bool) -> Vec<SiteSpec> {
    let spec = |name: String, c: &Coded| SiteSpec {
        name,
        shape: c.shape().to_vec(),
        codec: c.codec(),
        full_clip: match c {
            Coded::Block(q) => q.clip == ClipBounds::full(q.codec),
            _ => true,
        },
    };
    let mut out = Vec::new();
    if include_embedding {
        out.push(spec("embedding".into(), &cm.embedding));
    }
    for (l, layer) in cm.layers.iter().enumerate() {
        for (t, name) in layer.tensors.iter().zip(LAYER_TENSORS) {
            out.push(spec(format!("layer{l}.{name}"), t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: Vec<usize>, codec: Codec) -> SiteSpec {
        SiteSpec { name: "t".into(), shape, codec, full_clip: true }
    }

    #[test]
    fn single_int4_block() {
        let r = compression_ratio(&[one(vec![64], Codec::Int4)], "int4", 64).unwrap();
        assert_eq!((r.original_bits, r.compressed_bits), (2048, 264));
        assert_eq!(r.ratio, 2048.0 / 264.0);
        assert!((r.ratio - 7.758).abs() < 5e-4);
    }

    #[test]
    fn single_int8_tile_and_clip_metadata() {
        let mut s = one(vec![64, 64], Codec::Int8);
        let b = site_bits(&s, 64).unwrap();
        assert_eq!((b.code_bits, b.shift_bits, b.clip_bits), (32768, 8, 0));
        s.full_clip = false;
        assert_eq!(site_bits(&s, 64).unwrap().compressed_bits(), 32768 + 8 + 16);
    }

    #[test]
    fn padding_is_counted() {
        // 65 elements need two 64-element tiles
        let b = site_bits(&one(vec![65], Codec::Int8), 64).unwrap();
        assert_eq!((b.code_bits, b.shift_bits), (128 * 8, 16));
        let b = site_bits(&one(vec![3], Codec::Int4), 64).unwrap();
        assert_eq!(b.code_bits, 32 * 8);
    }

    #[test]
    fn fp32_config_has_ratio_one() {
        let cfg = ModelConfig::preset("fp32").unwrap();
        let sites = encoder_sites(&Dims::toy(), &cfg, true);
        let r = compression_ratio(&sites, "fp32", 64).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.original_bits, r.compressed_bits);
    }

    #[test]
    fn bert_base_int4_8() {
        let cfg = ModelConfig::preset("int4_8").unwrap();
        let sites = encoder_sites(&Dims::bert_base(), &cfg, false);
        let r = compression_ratio(&sites, "int4_8", 64).unwrap();
        // per layer: 7,077,888 int4 weights in 1728 tiles, 9,984 int8 vectors in 156 tiles
        let per_layer_orig = 32 * (7_077_888 + 9_984) as u64;
        let per_layer_comp = (4 * 7_077_888 + 8 * 9_984 + 8 * (1728 + 156)) as u64;
        assert_eq!(r.original_bits, 12 * per_layer_orig);
        assert_eq!(r.compressed_bits, 12 * per_layer_comp);
        assert!((7.7..=8.0).contains(&r.ratio), "{}", r.ratio);
    }
}
