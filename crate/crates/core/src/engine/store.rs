//! Record layouts for weights, compressed models, token batches and outputs.
//!
//! | record              | kind   | content                           |
//! |---------------------|--------|-----------------------------------|
//! | `model.dims`        | CONFIG | [`Dims`] as JSON                  |
//! | `model.config`      | CONFIG | [`ModelConfig`] as JSON (compressed only) |
//! | `embedding`         | tensor | `[vocab, hidden]`                 |
//! | `layer{l}.{tensor}` | tensor | names from [`LAYER_TENSORS`]      |
//! | `layer{l}.exp_lut`, `layer{l}.gelu_lut`, `sqrt_lut` | LUT | compressed only |
//! | `calib.{site}`      | CALIB  | per-site histogram                |
//! | `calib.lut_ranges`  | CONFIG | exp / GELU input ranges per layer |
//! | `tokens`            | FP32   | `[sequences, length]` token ids   |
//! | `output.{i}`        | FP32   | `[length, hidden]` hidden states  |

use std::collections::{BTreeMap, HashMap};

use super::compressed::{Calibration, Coded, CompressedLayer, CompressedModel};
use super::{Dims, EncoderWeights, LayerWeights, ModelConfig, LAYER_TENSORS};
use crate::container::{Payload, Record};
use crate::error::{BctError, Result};
use crate::nonlinear::Lut256;
use crate::quantizer::CalibStats;
use crate::tensor::Tensor;

const DIMS: &str = "model.dims";
const CONFIG: &str = "model.config";
const TOKENS: &str = "tokens";
const CALIB_PREFIX: &str = "calib.";
const LUT_RANGES: &str = "calib.lut_ranges";
const OUTPUT_PREFIX: &str = "output.";

fn bad(msg: impl Into<String>) -> BctError {
    BctError::InvalidInput(msg.into())
}

fn json_record<T: serde::Serialize>(name: &str, v: &T) -> Record {
    Record::new(name, Payload::Config(serde_json::to_string(v).expect("serializable")))
}

fn coded_payload(c: &Coded) -> Payload {
    match c {
        Coded::Fp32(t) => Payload::Fp32(t.clone()),
        Coded::Block(q) => Payload::BlockQ(q.clone()),
        Coded::Fp8(t) => Payload::Fp8(t.clone()),
    }
}

struct Index<'a>(HashMap<&'a str, &'a Payload>);

impl<'a> Index<'a> {
    fn new(records: &'a [Record]) -> Self {
        Self(records.iter().map(|r| (r.name.as_str(), &r.payload)).collect())
    }

    fn get(&self, name: &str) -> Result<&'a Payload> {
        self.0.get(name).copied().ok_or_else(|| bad(format!("missing record {name:?}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        match self.get(name)? {
            Payload::Config(s) => serde_json::from_str(s).map_err(|e| bad(format!("record {name:?}: {e}"))),
            _ => Err(bad(format!("record {name:?} is not a CONFIG record"))),
        }
    }

    fn coded(&self, name: &str) -> Result<Coded> {
        Ok(match self.get(name)? {
            Payload::Fp32(t) => Coded::Fp32(t.clone()),
            Payload::BlockQ(q) => Coded::Block(q.clone()),
            Payload::Fp8(t) => Coded::Fp8(t.clone()),
            _ => return Err(bad(format!("record {name:?} is not a tensor"))),
        })
    }

    fn lut(&self, name: &str) -> Result<Lut256> {
        match self.get(name)? {
            Payload::Lut(l) => Ok(l.clone()),
            _ => Err(bad(format!("record {name:?} is not a LUT"))),
        }
    }
}

fn layer_name(l: usize, tensor: &str) -> String {
    format!("layer{l}.{tensor}")
}

/// Whether the records hold a compressed model rather than fp32 weights.
pub fn is_compressed(records: &[Record]) -> bool {
    records.iter().any(|r| r.name == CONFIG)
}

pub fn weights_to_records(w: &EncoderWeights<f32>) -> Vec<Record> {
    let mut out = vec![json_record(DIMS, &w.dims), Record::new("embedding", Payload::Fp32(w.embedding.clone()))];
    for (l, lw) in w.layers.iter().enumerate() {
        for (t, name) in lw.tensors().iter().zip(LAYER_TENSORS) {
            out.push(Record::new(layer_name(l, name), Payload::Fp32((*t).clone())));
        }
    }
    out
}

/// Reads fp32 weights; low-bit tensors are dequantized.
pub fn weights_from_records(records: &[Record]) -> Result<EncoderWeights<f32>> {
    let ix = Index::new(records);
    let dims: Dims = ix.json(DIMS)?;
    dims.validate()?;
    let embedding = ix.coded("embedding")?.to_f32().into_owned();
    let layers = (0..dims.layers)
        .map(|l| {
            let t: Vec<Tensor<f32>> = LAYER_TENSORS
                .iter()
                .map(|n| Ok(ix.coded(&layer_name(l, n))?.to_f32().into_owned()))
                .collect::<Result<_>>()?;
            Ok(LayerWeights::from_tensors(t.try_into().expect("16 tensors")))
        })
        .collect::<Result<Vec<_>>>()?;
    let w = EncoderWeights { dims, embedding, layers };
    w.validate().map_err(|e| bad(e.to_string()))?;
    Ok(w)
}

pub fn calib_to_records(calib: &BTreeMap<String, CalibStats>) -> Vec<Record> {
    calib.iter().map(|(site, s)| Record::new(format!("{CALIB_PREFIX}{site}"), Payload::Calib(s.clone()))).collect()
}

pub fn calib_from_records(records: &[Record]) -> BTreeMap<String, CalibStats> {
    records
        .iter()
        .filter_map(|r| match (&r.payload, r.name.strip_prefix(CALIB_PREFIX)) {
            (Payload::Calib(s), Some(site)) => Some((site.to_string(), s.clone())),
            _ => None,
        })
        .collect()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LutRanges {
    exp_range: Vec<f64>,
    gelu_range: Vec<f64>,
}

pub fn calibration_to_records(c: &Calibration) -> Vec<Record> {
    let mut out = calib_to_records(&c.sites);
    out.push(json_record(LUT_RANGES, &LutRanges { exp_range: c.exp_range.clone(), gelu_range: c.gelu_range.clone() }));
    out
}

pub fn calibration_from_records(records: &[Record]) -> Result<Calibration> {
    let r: LutRanges = Index::new(records).json(LUT_RANGES)?;
    if r.exp_range.len() != r.gelu_range.len() {
        return Err(bad("calib.lut_ranges: layer counts differ"));
    }
    Ok(Calibration { sites: calib_from_records(records), exp_range: r.exp_range, gelu_range: r.gelu_range })
}

impl CompressedModel {
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![
            json_record(DIMS, &self.dims),
            json_record(CONFIG, &self.config),
            Record::new("embedding", coded_payload(&self.embedding)),
            Record::new("sqrt_lut", Payload::Lut(self.sqrt_lut.clone())),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (t, name) in layer.tensors.iter().zip(LAYER_TENSORS) {
                out.push(Record::new(layer_name(l, name), coded_payload(t)));
            }
            out.push(Record::new(layer_name(l, "exp_lut"), Payload::Lut(layer.exp_lut.clone())));
            out.push(Record::new(layer_name(l, "gelu_lut"), Payload::Lut(layer.gelu_lut.clone())));
        }
        out.extend(calib_to_records(&self.calib));
        out
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let ix = Index::new(records);
        let dims: Dims = ix.json(DIMS)?;
        dims.validate()?;
        let config: ModelConfig = ix.json(CONFIG)?;
        config.validate()?;
        let embedding = ix.coded("embedding")?;
        if embedding.shape() != [dims.vocab, dims.hidden] {
            return Err(bad("embedding shape does not match model.dims"));
        }
        let shapes = LayerWeights::<f32>::shapes(&dims);
        let layers = (0..dims.layers)
            .map(|l| {
                let tensors = LAYER_TENSORS
                    .iter()
                    .zip(&shapes)
                    .map(|(n, s)| {
                        let c = ix.coded(&layer_name(l, n))?;
                        if c.shape() != s.as_slice() {
                            return Err(bad(format!("{}: shape {:?}, expected {s:?}", layer_name(l, n), c.shape())));
                        }
                        if let Coded::Block(q) = &c {
                            if q.grid.block_size != config.block_size {
                                return Err(bad(format!("{}: block size differs from the config", layer_name(l, n))));
                            }
                        }
                        Ok(c)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CompressedLayer {
                    tensors,
                    exp_lut: ix.lut(&layer_name(l, "exp_lut"))?,
                    gelu_lut: ix.lut(&layer_name(l, "gelu_lut"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CompressedModel {
            config,
            dims,
            embedding,
            layers,
            sqrt_lut: ix.lut("sqrt_lut")?,
            calib: calib_from_records(records),
        })
    }
}

pub fn tokens_to_record(batch: &[Vec<usize>]) -> Result<Record> {
    let len = batch.first().map_or(0, Vec::len);
    if batch.iter().any(|s| s.len() != len) {
        return Err(bad("token sequences must share one length"));
    }
    if batch.iter().flatten().any(|&id| id >= 1 << 24) {
        return Err(bad("token ids must be below 2^24"));
    }
    let data = batch.iter().flatten().map(|&id| id as f32).collect();
    Ok(Record::new(TOKENS, Payload::Fp32(Tensor::new(vec![batch.len(), len], data)?)))
}

pub fn tokens_from_records(records: &[Record]) -> Result<Vec<Vec<usize>>> {
    let t = match Index::new(records).get(TOKENS)? {
        Payload::Fp32(t) if t.rank() == 2 => t,
        _ => return Err(bad("record \"tokens\" must be a rank-2 FP32 tensor")),
    };
    let len = t.shape()[1];
    if t.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(bad("token ids must be non-negative integers"));
    }
    Ok(t.data().chunks(len.max(1)).map(|r| r.iter().map(|&v| v as usize).collect()).take(t.shape()[0]).collect())
}

pub fn outputs_to_records(outputs: &[Tensor<f32>]) -> Vec<Record> {
    outputs.iter().enumerate().map(|(i, t)| Record::new(format!("{OUTPUT_PREFIX}{i}"), Payload::Fp32(t.clone()))).collect()
}

/// `output.{i}` records in index order.
pub fn outputs_from_records(records: &[Record]) -> Result<Vec<Tensor<f32>>> {
    let mut found: Vec<(usize, &Tensor<f32>)> = records
        .iter()
        .filter_map(|r| {
            let i = r.name.strip_prefix(OUTPUT_PREFIX)?.parse().ok()?;
            match &r.payload {
                Payload::Fp32(t) => Some((i, t)),
                _ => None,
            }
        })
        .collect();
    found.sort_by_key(|p| p.0);
    if found.iter().enumerate().any(|(k, (i, _))| k != *i) {
        return Err(bad("output records are not numbered 0..n"));
    }
    Ok(found.into_iter().map(|(_, t)| t.clone()).collect())
}
