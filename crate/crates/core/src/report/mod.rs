//! Compression-ratio accounting, fidelity metrics, distribution summaries and
//! their table / JSON / CSV renderings.

mod distribution;
mod metrics;
mod ratio;

pub use distribution::{distribution_report, heterogeneous_example, quantile, DistributionReport, FiveNumber, MethodSummary};
pub use metrics::{cosine, fidelity_metrics, histogram_kl, token_cosines, Fidelity};
pub use ratio::{
    compression_ratio, encoder_sites, model_sites, site_bits, RatioReport, SiteBits, SiteSpec, CLIP_BITS,
    PAPER_INT4_8_RATIO, SHIFT_BITS,
};

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{invalid_arg, Result};
use crate::nonlinear::Lut256;

/// Version of the JSON report layout; follows the container version.
pub const SCHEMA_VERSION: u32 = crate::container::VERSION as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
    Csv,
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

fn csv_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| invalid_arg(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid_arg(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn render_ratio(r: &RatioReport, f: Format) -> Result<String> {
    Ok(match f {
        Format::Json => json(r),
        Format::Csv => csv_rows(
            &["site", "shape", "codec", "original_bits", "code_bits", "shift_bits", "clip_bits"],
            r.sites.iter().map(|s| {
                vec![
                    s.name.clone(),
                    format!("{:?}", s.shape),
                    s.codec.name().to_string(),
                    s.original_bits.to_string(),
                    s.code_bits.to_string(),
                    s.shift_bits.to_string(),
                    s.clip_bits.to_string(),
                ]
            }),
        )?,
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "config        {}", r.config).ok();
            writeln!(s, "block size    {}", r.block_size).ok();
            writeln!(s, "sites         {}", r.sites.len()).ok();
            writeln!(s, "original bits {}", r.original_bits).ok();
            writeln!(s, "packed bits   {}", r.compressed_bits).ok();
            writeln!(s, "ratio         {:.4}", r.ratio).ok();
            writeln!(s, "reference     {:.3} (BCT_int4/8 on BERT-base)", r.reference_ratio).ok();
            for a in &r.assumptions {
                writeln!(s, "  - {a}").ok();
            }
            s
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub outputs: usize,
    pub token_cosine_mean: f64,
    pub token_cosine_min: f64,
    pub overall: Fidelity,
    pub per_output: Vec<Fidelity>,
}

pub fn render_compare(r: &CompareReport, f: Format) -> Result<String> {
    let row = |name: String, m: &Fidelity| {
        vec![name, format!("{:.9}", m.cosine), format!("{:.6e}", m.mse), format!("{:.6e}", m.max_abs_err), format!("{:.6e}", m.kl)]
    };
    Ok(match f {
        Format::Json => json(r),
        Format::Csv => csv_rows(
            &["output", "cosine", "mse", "max_abs_err", "kl"],
            std::iter::once(row("all".into(), &r.overall))
                .chain(r.per_output.iter().enumerate().map(|(i, m)| row(i.to_string(), m))),
        )?,
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "outputs            {}", r.outputs).ok();
            writeln!(s, "token cosine mean  {:.6}", r.token_cosine_mean).ok();
            writeln!(s, "token cosine min   {:.6}", r.token_cosine_min).ok();
            writeln!(s, "cosine             {:.6}", r.overall.cosine).ok();
            writeln!(s, "mse                {:.6e}", r.overall.mse).ok();
            writeln!(s, "max abs error      {:.6e}", r.overall.max_abs_err).ok();
            writeln!(s, "kl                 {:.6e}", r.overall.kl).ok();
            s
        }
    })
}

pub fn render_distribution(r: &DistributionReport, f: Format) -> Result<String> {
    Ok(match f {
        Format::Json => json(r),
        Format::Csv => csv_rows(
            &["method", "min", "q1", "median", "q3", "max", "mse"],
            r.methods.iter().map(|m| {
                let mut v = vec![m.method.to_string()];
                v.extend(m.summary.as_array().iter().map(|x| format!("{x:e}")));
                v.push(format!("{:e}", m.mse));
                v
            }),
        )?,
        Format::Table => {
            let mut s = String::new();
            writeln!(s, "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}", "method", "min", "q1", "median", "q3", "max", "mse").ok();
            for m in &r.methods {
                let [a, b, c, d, e] = m.summary.as_array();
                writeln!(s, "{:<10} {a:>12.6} {b:>12.6} {c:>12.6} {d:>12.6} {e:>12.6} {:>12.4e}", m.method, m.mse).ok();
            }
            s
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LutDump {
    pub name: String,
    pub func: String,
    pub in_shift: i32,
    pub clip_min: i32,
    pub clip_max: i32,
    pub out_shift: i32,
    /// `(key code, value code)` for keys -128..=127.
    pub pairs: Vec<(i32, i32)>,
}

impl LutDump {
    pub fn new(name: &str, lut: &Lut256) -> Self {
        Self {
            name: name.to_string(),
            func: lut.func.name().to_string(),
            in_shift: lut.in_shift,
            clip_min: lut.clip.min,
            clip_max: lut.clip.max,
            out_shift: lut.out_shift,
            pairs: (-128..=127).map(|k| (k, lut.value(k) as i32)).collect(),
        }
    }
}

pub fn render_luts(luts: &[LutDump], f: Format) -> Result<String> {
    Ok(match f {
        Format::Json => json(&luts),
        Format::Csv => csv_rows(
            &["lut", "func", "in_shift", "out_shift", "key", "value"],
            luts.iter().flat_map(|l| {
                l.pairs.iter().map(move |(k, v)| {
                    vec![l.name.clone(), l.func.clone(), l.in_shift.to_string(), l.out_shift.to_string(), k.to_string(), v.to_string()]
                })
            }),
        )?,
        Format::Table => {
            let mut s = String::new();
            for l in luts {
                writeln!(
                    s,
                    "{} ({}) in_shift {} clip [{}, {}] out_shift {}",
                    l.name, l.func, l.in_shift, l.clip_min, l.clip_max, l.out_shift
                )
                .ok();
                for chunk in l.pairs.chunks(8) {
                    let line: Vec<String> = chunk.iter().map(|(k, v)| format!("{k:>4}:{v:>4}")).collect();
                    writeln!(s, "  {}", line.join(" ")).ok();
                }
            }
            s
        }
    })
}
