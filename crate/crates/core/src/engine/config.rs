use serde::{Deserialize, Serialize};

use super::DEFAULT_EPS;
use crate::error::{invalid_arg, Result};
use crate::formats::Codec;

/// Weight, bias and intermediate-result codecs of one site class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCodecs {
    pub w: Codec,
    pub b: Codec,
    pub i: Codec,
}

impl SiteCodecs {
    pub const fn new(w: Codec, b: Codec, i: Codec) -> Self {
        Self { w, b, i }
    }

    pub const fn all(c: Codec) -> Self {
        Self { w: c, b: c, i: c }
    }
}

/// How integer activation sites pick their clip bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    /// Every code of the codec is usable.
    #[default]
    FullRange,
    /// Bounds from KL calibration of each site.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub block_size: usize,
    /// Table codec and gathered-output codec; the bias entry is unused.
    pub embedding: SiteCodecs,
    /// Q/K/V and attention output projections.
    pub linear: SiteCodecs,
    /// Attention products `QK^T` and `PV`, and the score scaling.
    pub matmul: Codec,
    pub softmax: Codec,
    pub layernorm: SiteCodecs,
    pub ffn: SiteCodecs,
    pub gelu: Codec,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub clip_policy: ClipPolicy,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

pub const PRESETS: [&str; 6] = ["int8_fp32", "int4_8", "int8", "fp8_e4m3", "fp8_e5m2", "fp32"];

impl ModelConfig {
    /// Named configurations: the four compressed models plus an all-fp32
    /// passthrough and an e5m2 variant of the fp8 model.
    pub fn preset(name: &str) -> Result<Self> {
        use Codec::*;
        let uniform = |c: Codec| Self {
            name: name.to_string(),
            block_size: 64,
            embedding: SiteCodecs::all(Fp32),
            linear: SiteCodecs::all(c),
            matmul: c,
            softmax: c,
            layernorm: SiteCodecs::all(c),
            ffn: SiteCodecs::all(c),
            gelu: c,
            eps: DEFAULT_EPS,
            clip_policy: ClipPolicy::FullRange,
        };
        Ok(match name {
            "int8_fp32" => Self {
                embedding: SiteCodecs::all(Int8),
                ffn: SiteCodecs::all(Int8),
                ..uniform(Fp32)
            },
            "int4_8" => Self {
                linear: SiteCodecs::new(Int4, Int8, Int8),
                ffn: SiteCodecs::new(Int4, Int8, Int8),
                ..uniform(Int8)
            },
            "int8" => uniform(Int8),
            "fp8" | "fp8_e4m3" => uniform(Fp8E4M3),
            "fp8_e5m2" => uniform(Fp8E5M2),
            "fp32" => Self { embedding: SiteCodecs::all(Fp32), ..uniform(Fp32) },
            other => return Err(invalid_arg(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        })
    }

    pub fn with_block_size(mut self, bs: usize) -> Self {
        self.block_size = bs;
        self
    }

    pub fn with_clip_policy(mut self, p: ClipPolicy) -> Self {
        self.clip_policy = p;
        self
    }

    fn intermediates(&self) -> [Codec; 7] {
        [self.embedding.i, self.linear.i, self.matmul, self.softmax, self.layernorm.i, self.ffn.i, self.gelu]
    }

    /// Whether any activation site is low-bit, which makes calibration data
    /// necessary.
    pub fn needs_calibration(&self) -> bool {
        self.intermediates().iter().any(|c| *c != Codec::Fp32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(invalid_arg("block_size must be at least 1"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid_arg("eps must be finite and non-negative"));
        }
        let sites = [("linear", self.linear), ("layernorm", self.layernorm), ("ffn", self.ffn)];
        for (name, s) in sites {
            if s.w.is_int() != s.b.is_int() || s.w.is_int() != s.i.is_int() {
                return Err(invalid_arg(format!("{name}: weights, bias and output must all be integer or all not")));
            }
            if s.w.is_fp8() != s.b.is_fp8() {
                return Err(invalid_arg(format!("{name}: weights and bias must share the fp8 / fp32 choice")));
            }
        }
        if self.embedding.w.is_fp8() {
            return Err(invalid_arg("the embedding table must be fp32 or integer"));
        }
        Ok(())
    }

    /// Codec of each site's output.
    pub fn site_codec(&self, site: SiteKind) -> Codec {
        use SiteKind::*;
        match site {
            Embedding => self.embedding.i,
            Query | Key | Value | AttnOut | Residual1 => self.linear.i,
            Scores | Scaled | HeadContext => self.matmul,
            Probs => self.softmax,
            Norm1 | Norm2 => self.layernorm.i,
            Ffn1 | Ffn2 | Residual2 => self.ffn.i,
            Gelu => self.gelu,
        }
    }
}

/// Tensor sites of one encoder layer, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Embedding,
    Query,
    Key,
    Value,
    Scores,
    Scaled,
    Probs,
    HeadContext,
    AttnOut,
    Residual1,
    Norm1,
    Ffn1,
    Gelu,
    Ffn2,
    Residual2,
    Norm2,
}

impl SiteKind {
    pub const ALL: [SiteKind; 16] = [
        SiteKind::Embedding,
        SiteKind::Query,
        SiteKind::Key,
        SiteKind::Value,
        SiteKind::Scores,
        SiteKind::Scaled,
        SiteKind::Probs,
        SiteKind::HeadContext,
        SiteKind::AttnOut,
        SiteKind::Residual1,
        SiteKind::Norm1,
        SiteKind::Ffn1,
        SiteKind::Gelu,
        SiteKind::Ffn2,
        SiteKind::Residual2,
        SiteKind::Norm2,
    ];

    pub fn name(self) -> &'static str {
        use SiteKind::*;
        match self {
            Embedding => "embedding",
            Query => "q",
            Key => "k",
            Value => "v",
            Scores => "scores",
            Scaled => "scaled",
            Probs => "probs",
            HeadContext => "context",
            AttnOut => "attn_out",
            Residual1 => "residual1",
            Norm1 => "ln1",
            Ffn1 => "ffn1",
            Gelu => "gelu",
            Ffn2 => "ffn2",
            Residual2 => "residual2",
            Norm2 => "ln2",
        }
    }

    /// Site label in the form `layer{l}.{name}`; the embedding has none.
    pub fn label(self, layer: usize) -> String {
        match self {
            SiteKind::Embedding => "embedding".into(),
            s => format!("layer{layer}.{}", s.name()),
        }
    }
}
