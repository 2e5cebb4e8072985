//! Command-line front end: synthetic models and inputs, calibration,
//! quantization, inference and reports.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bct::container::{load, save, Payload, Record};
use bct::engine::{
    calibrate_model, calibration_from_records, calibration_to_records, compress_calibrated, forward_compressed,
    forward_fp32, is_compressed, outputs_from_records, outputs_to_records, random_tokens, tokens_from_records,
    tokens_to_record, weights_from_records, weights_to_records, ClipPolicy, CompressedModel, Dims, EncoderWeights,
    ModelConfig, SiteKind,
};
use bct::report::{
    compression_ratio, distribution_report, encoder_sites, fidelity_metrics, heterogeneous_example, model_sites,
    render_compare, render_distribution, render_luts, render_ratio, token_cosines, CompareReport, Format, LutDump,
    SCHEMA_VERSION,
};
use bct::{BctError, Result, Tensor};

#[derive(Parser)]
#[command(name = "bct", version, about = "Blockwise low-bit compression and integer inference for transformer encoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Compression preset.
    #[arg(long, global = true, default_value = "int8")]
    config: String,
    /// Tile edge length.
    #[arg(long, global = true, default_value_t = 64)]
    block_size: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Seed for synthetic models and inputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Clip bounds of integer activation sites.
    #[arg(long, global = true, value_enum, default_value_t = ClipPolicy::FullRange)]
    clip_policy: ClipPolicy,
}

#[derive(Args)]
struct Shape {
    /// `toy` or `bert-base`; individual flags override.
    #[arg(long, default_value = "toy")]
    dims: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
}

impl Shape {
    fn resolve(&self) -> Result<Dims> {
        let mut d = match self.dims.as_str() {
            "toy" => Dims::toy(),
            "bert-base" => Dims::bert_base(),
            other => return Err(BctError::InvalidInput(format!("unknown dims {other:?}; use toy or bert-base"))),
        };
        d.layers = self.layers.unwrap_or(d.layers);
        d.hidden = self.hidden.unwrap_or(d.hidden);
        d.heads = self.heads.unwrap_or(d.heads);
        d.ffn = self.ffn.unwrap_or(d.ffn);
        d.vocab = self.vocab.unwrap_or(d.vocab);
        d.validate()?;
        Ok(d)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Random fp32 encoder weights.
    Synth {
        #[command(flatten)]
        shape: Shape,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random token sequences.
    Tokens {
        #[arg(long, default_value_t = 1000)]
        vocab: usize,
        #[arg(long, default_value_t = 16)]
        sequences: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Activation histograms and clip bounds from a reference run.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compresses fp32 weights under `--config`.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Output of `calibrate`.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Token container to calibrate on directly.
        #[arg(long, conflicts_with = "calib")]
        inputs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs fp32 weights or a compressed model over a token container.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fidelity of candidate outputs against reference outputs.
    Compare { reference: PathBuf, candidate: PathBuf },
    /// Bit accounting of a model file or of synthetic shapes.
    Ratio {
        /// Compressed model; without it the shapes of `--dims` are used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        shape: Shape,
        #[arg(long)]
        include_embedding: bool,
    },
    /// Blockwise against layerwise quantization of one tensor.
    Distribution {
        /// Weights container; without it a built-in 4x4 example is used.
        #[arg(long, requires = "tensor")]
        model: Option<PathBuf>,
        #[arg(long)]
        tensor: Option<String>,
        #[arg(long, default_value_t = 8)]
        bits: u32,
    },
    /// Lookup tables of a compressed model.
    LutDump {
        #[arg(long)]
        model: PathBuf,
    },
}

fn preset(c: &Common) -> Result<ModelConfig> {
    ModelConfig::preset(&c.config)
        .map_err(|e| BctError::InvalidInput(e.to_string()))
        .map(|m| m.with_block_size(c.block_size).with_clip_policy(c.clip_policy))
}

fn summary(out: &Path, records: &[Record]) -> String {
    format!("wrote {} records to {}\n", records.len(), out.display())
}

fn write(out: &Path, records: &[Record]) -> Result<String> {
    save(out, records)?;
    Ok(summary(out, records))
}

fn run(cli: Cli) -> Result<String> {
    let c = &cli.common;
    match cli.cmd {
        Cmd::Synth { shape, out } => {
            let w = EncoderWeights::<f32>::random(shape.resolve()?, c.seed)?;
            write(&out, &weights_to_records(&w))
        }
        Cmd::Tokens { vocab, sequences, len, out } => {
            if vocab == 0 {
                return Err(BctError::InvalidInput("vocab must be positive".into()));
            }
            write(&out, &[tokens_to_record(&random_tokens(vocab, sequences, len, c.seed))?])
        }
        Cmd::Calibrate { model, inputs, out } => {
            let w = weights_from_records(&load(&model)?)?;
            let mut cal = calibrate_model(&w, &tokens_from_records(&load(&inputs)?)?)?;
            let cfg = preset(c)?;
            for l in 0..w.dims.layers {
                for kind in SiteKind::ALL {
                    let codec = cfg.site_codec(kind);
                    if let Some(s) = cal.sites.get_mut(&kind.label(l)) {
                        if codec.is_int() && s.clip.is_none() && s.total() > 0 && s.observed_max > 0.0 {
                            s.calibrate(codec)?;
                        }
                    }
                }
            }
            write(&out, &calibration_to_records(&cal))
        }
        Cmd::Quantize { model, calib, inputs, out } => {
            let w = weights_from_records(&load(&model)?)?;
            let cal = match (calib, inputs) {
                (Some(p), _) => calibration_from_records(&load(p)?)?,
                (None, Some(p)) => calibrate_model(&w, &tokens_from_records(&load(p)?)?)?,
                (None, None) => calibrate_model(&w, &[])?,
            };
            write(&out, &compress_calibrated(&w, &preset(c)?, &cal)?.to_records())
        }
        Cmd::Infer { model, inputs, out } => {
            let records = load(&model)?;
            let batch = tokens_from_records(&load(&inputs)?)?;
            let outputs = if is_compressed(&records) {
                forward_compressed(&CompressedModel::from_records(&records)?, &batch)?
            } else {
                forward_fp32(&weights_from_records(&records)?, &batch)?
            };
            write(&out, &outputs_to_records(&outputs))
        }
        Cmd::Compare { reference, candidate } => {
            let r = outputs_from_records(&load(&reference)?)?;
            let k = outputs_from_records(&load(&candidate)?)?;
            let (mean, min) = token_cosines(&r, &k)?;
            let flat = |v: &[Tensor<f32>]| {
                let data: Vec<f32> = v.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(vec![data.len()], data)
            };
            let report = CompareReport {
                schema_version: SCHEMA_VERSION,
                outputs: r.len(),
                token_cosine_mean: mean,
                token_cosine_min: min,
                overall: fidelity_metrics(&flat(&r)?, &flat(&k)?)?,
                per_output: r.iter().zip(&k).map(|(a, b)| fidelity_metrics(a, b)).collect::<Result<_>>()?,
            };
            render_compare(&report, c.format)
        }
        Cmd::Ratio { model, shape, include_embedding } => {
            let report = match model {
                Some(p) => {
                    let cm = CompressedModel::from_records(&load(p)?)?;
                    compression_ratio(&model_sites(&cm, include_embedding), &cm.config.name, cm.config.block_size)?
                }
                None => {
                    let cfg = preset(c)?;
                    compression_ratio(&encoder_sites(&shape.resolve()?, &cfg, include_embedding), &cfg.name, c.block_size)?
                }
            };
            render_ratio(&report, c.format)
        }
        Cmd::Distribution { model, tensor, bits } => {
            let t = match (model, tensor) {
                (Some(p), Some(name)) => {
                    let records = load(p)?;
                    match records.iter().find(|r| r.name == name).map(|r| &r.payload) {
                        Some(Payload::Fp32(t)) => t.map(|v| v as f64),
                        Some(_) => return Err(BctError::InvalidInput(format!("record {name:?} is not an FP32 tensor"))),
                        None => return Err(BctError::InvalidInput(format!("no record named {name:?}"))),
                    }
                }
                _ => heterogeneous_example(),
            };
            let report = distribution_report(&t, c.block_size, bits).map_err(|e| BctError::InvalidInput(e.to_string()))?;
            render_distribution(&report, c.format)
        }
        Cmd::LutDump { model } => {
            let cm = CompressedModel::from_records(&load(model)?)?;
            let mut luts = Vec::new();
            for (l, layer) in cm.layers.iter().enumerate() {
                luts.push(LutDump::new(&format!("layer{l}.exp_lut"), &layer.exp_lut));
                luts.push(LutDump::new(&format!("layer{l}.gelu_lut"), &layer.gelu_lut));
            }
            luts.push(LutDump::new("sqrt_lut", &cm.sqrt_lut));
            render_luts(&luts, c.format)
        }
    }
}

fn exit_code(e: &BctError) -> u8 {
    match e {
        BctError::CalibrationMissing(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bct: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
