//! `.bct` container: a flat, little-endian record file.
//!
//! ```text
//! header     "BCT1" | version u16 | record count u32
//! directory  per record: name (u16 length + UTF-8) | kind u8 | rank u8 |
//!            dims u32 * rank | codec u8 | offset u64 | length u64
//! payloads   contiguous, in directory order
//! ```
//!
//! Payload layouts by kind:
//!
//! - `FP32`: `f32` values, row-major.
//! - `BLOCKQ`: block size u32, clip min i8, clip max i8, one i8 shift per
//!   block, then tile-major codes (padding included); int4 codes are packed
//!   two per byte, low nibble first.
//! - `FP8`: one byte per element.
//! - `LUT`: function u8, input shift i8, clip min i8, clip max i8, output
//!   shift i8, then the 256 values for keys -128..=127.
//! - `CALIB`: observed max f32, flags u8 (bit 0 clip, bit 1 threshold),
//!   clip min i32, clip max i32, threshold f32, then 2048 u64 counts.
//! - `CONFIG`: UTF-8 JSON.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::error::{invalid_arg, BctError, Result};
use crate::formats::{Codec, Fp8Tensor};
use crate::nonlinear::{Lut256, LutFunc};
use crate::quantizer::{BlockQTensor, CalibStats, ClipBounds, HISTOGRAM_BINS};
use crate::tensor::{checked_numel, BlockGrid, Tensor};

pub const MAGIC: &[u8; 4] = b"BCT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;
/// Codec byte of records that are not element tensors.
pub const NO_CODEC: u8 = 0xFF;
const MAX_BLOCK_SIZE: u32 = 1 << 16;
const LUT_LEN: usize = 5 + 256;
const CALIB_LEN: usize = 17 + 8 * HISTOGRAM_BINS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"BCT1\"")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated {0}")]
    Truncated(String),
    #[error("record {0:?}: payload lies outside the file")]
    OutOfBounds(String),
    #[error("records {0:?} and {1:?} have overlapping payloads")]
    Overlap(String, String),
    #[error("duplicate record name {0:?}")]
    DuplicateName(String),
    #[error("record {record:?}: {reason}")]
    InvalidRecord { record: String, reason: String },
    #[error("{0} unused bytes after the last payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Fp32Tensor = 0,
    BlockQTensor = 1,
    Fp8Tensor = 2,
    Lut = 3,
    Calib = 4,
    Config = 5,
}

impl RecordKind {
    pub fn from_id(id: u8) -> Option<Self> {
        use RecordKind::*;
        [Fp32Tensor, BlockQTensor, Fp8Tensor, Lut, Calib, Config].get(id as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fp32(Tensor<f32>),
    BlockQ(BlockQTensor),
    Fp8(Fp8Tensor),
    Lut(Lut256),
    Calib(CalibStats),
    Config(String),
}

impl Payload {
    pub fn kind(&self) -> RecordKind {
        match self {
            Payload::Fp32(_) => RecordKind::Fp32Tensor,
            Payload::BlockQ(_) => RecordKind::BlockQTensor,
            Payload::Fp8(_) => RecordKind::Fp8Tensor,
            Payload::Lut(_) => RecordKind::Lut,
            Payload::Calib(_) => RecordKind::Calib,
            Payload::Config(_) => RecordKind::Config,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Payload::Fp32(t) => t.shape().to_vec(),
            Payload::BlockQ(q) => q.shape.clone(),
            Payload::Fp8(t) => t.shape.clone(),
            Payload::Lut(_) => vec![256],
            Payload::Calib(_) => vec![HISTOGRAM_BINS],
            Payload::Config(s) => vec![s.len()],
        }
    }

    fn codec_id(&self) -> u8 {
        match self {
            Payload::Fp32(_) => Codec::Fp32.id(),
            Payload::BlockQ(q) => q.codec.id(),
            Payload::Fp8(t) => t.codec().id(),
            Payload::Lut(_) => Codec::Int8.id(),
            Payload::Calib(_) | Payload::Config(_) => NO_CODEC,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Self { name: name.into(), payload }
    }
}

fn encode_payload(p: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Payload::Fp32(t) => {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Payload::BlockQ(q) => {
            out.extend((q.grid.block_size as u32).to_le_bytes());
            out.push(q.clip.min as i8 as u8);
            out.push(q.clip.max as i8 as u8);
            out.extend(q.shifts.iter().map(|&s| s as u8));
            if q.codec == Codec::Int4 {
                for pair in q.codes.chunks(2) {
                    let lo = pair[0] as u8 & 0x0F;
                    let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0F);
                    out.push(lo | hi << 4);
                }
            } else {
                out.extend(q.codes.iter().map(|&c| c as u8));
            }
        }
        Payload::Fp8(t) => out.extend(&t.codes),
        Payload::Lut(l) => {
            out.push(l.func.id());
            out.extend([l.in_shift as i8 as u8, l.clip.min as i8 as u8, l.clip.max as i8 as u8, l.out_shift as i8 as u8]);
            out.extend(l.values.iter().map(|&v| v as u8));
        }
        Payload::Calib(c) => {
            out.extend(c.observed_max.to_le_bytes());
            let flags = c.clip.is_some() as u8 | (c.threshold.is_some() as u8) << 1;
            out.push(flags);
            let clip = c.clip.unwrap_or(ClipBounds { min: 0, max: 0 });
            out.extend(clip.min.to_le_bytes());
            out.extend(clip.max.to_le_bytes());
            out.extend(c.threshold.unwrap_or(0.0).to_le_bytes());
            for n in &c.histogram {
                out.extend(n.to_le_bytes());
            }
        }
        Payload::Config(s) => out.extend(s.as_bytes()),
    }
    out
}

fn check_writable(r: &Record) -> Result<()> {
    if r.name.len() > u16::MAX as usize {
        return Err(invalid_arg(format!("record name of {} bytes is too long", r.name.len())));
    }
    let shape = r.payload.shape();
    if shape.len() > u8::MAX as usize || shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(invalid_arg(format!("record {:?}: shape {shape:?} does not fit the directory", r.name)));
    }
    match &r.payload {
        Payload::BlockQ(q) if q.grid.block_size as u64 > MAX_BLOCK_SIZE as u64 => {
            Err(invalid_arg(format!("record {:?}: block size above {MAX_BLOCK_SIZE}", r.name)))
        }
        Payload::Lut(l) if [l.in_shift, l.out_shift].iter().any(|s| !(-128..=127).contains(s)) => {
            Err(invalid_arg(format!("record {:?}: table shifts must fit i8", r.name)))
        }
        Payload::Calib(c) if c.histogram.len() != HISTOGRAM_BINS => {
            Err(invalid_arg(format!("record {:?}: histogram needs {HISTOGRAM_BINS} bins", r.name)))
        }
        _ => Ok(()),
    }
}

/// Serializes records; identical inputs give identical bytes.
pub fn write_container(records: &[Record]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(invalid_arg(format!("duplicate record name {:?}", r.name)));
        }
        check_writable(r)?;
    }
    let payloads: Vec<Vec<u8>> = records.iter().map(|r| encode_payload(&r.payload)).collect();
    let dir_len: usize = records.iter().map(|r| 2 + r.name.len() + 2 + 4 * r.payload.shape().len() + 1 + 16).sum();

    let mut out = Vec::with_capacity(HEADER_LEN + dir_len + payloads.iter().map(Vec::len).sum::<usize>());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((records.len() as u32).to_le_bytes());
    let mut offset = (HEADER_LEN + dir_len) as u64;
    for (r, p) in records.iter().zip(&payloads) {
        out.extend((r.name.len() as u16).to_le_bytes());
        out.extend(r.name.as_bytes());
        out.push(r.payload.kind() as u8);
        let shape = r.payload.shape();
        out.push(shape.len() as u8);
        for d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        out.push(r.payload.codec_id());
        out.extend(offset.to_le_bytes());
        out.extend((p.len() as u64).to_le_bytes());
        offset += p.len() as u64;
    }
    for p in payloads {
        out.extend(p);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ContainerError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> std::result::Result<[u8; N], ContainerError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N, what)?);
        Ok(a)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, ContainerError> {
        Ok(self.array::<1>(what)?[0])
    }
}

struct Entry {
    name: String,
    kind: u8,
    shape: Vec<usize>,
    codec: u8,
    offset: u64,
    length: u64,
}

fn invalid(name: &str, reason: impl Into<String>) -> ContainerError {
    ContainerError::InvalidRecord { record: name.to_string(), reason: reason.into() }
}

fn decode_payload(e: &Entry, bytes: &[u8]) -> std::result::Result<Payload, ContainerError> {
    let name = e.name.as_str();
    let kind = RecordKind::from_id(e.kind).ok_or_else(|| invalid(name, format!("unknown kind {}", e.kind)))?;
    let numel = checked_numel(&e.shape).ok_or_else(|| invalid(name, "shape overflows"))?;
    let want_len = |n: Option<usize>| -> std::result::Result<(), ContainerError> {
        match n {
            Some(n) if n == bytes.len() => Ok(()),
            _ => Err(invalid(name, format!("payload of {} bytes does not match the shape", bytes.len()))),
        }
    };
    let expect_codec = |c: u8| -> std::result::Result<(), ContainerError> {
        if e.codec == c {
            Ok(())
        } else {
            Err(invalid(name, format!("codec id {} does not fit the record kind", e.codec)))
        }
    };
    match kind {
        RecordKind::Fp32Tensor => {
            expect_codec(Codec::Fp32.id())?;
            want_len(numel.checked_mul(4))?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            Tensor::new(e.shape.clone(), data).map(Payload::Fp32).map_err(|err| invalid(name, err.to_string()))
        }
        RecordKind::Fp8Tensor => {
            let format = Codec::from_id(e.codec)
                .and_then(Codec::fp8_format)
                .ok_or_else(|| invalid(name, format!("codec id {} is not an fp8 format", e.codec)))?;
            want_len(Some(numel))?;
            if let Some(c) = bytes.iter().find(|&&c| format.is_reserved(c)) {
                return Err(invalid(name, format!("reserved fp8 code {c:#04x}")));
            }
            Ok(Payload::Fp8(Fp8Tensor { shape: e.shape.clone(), format, codes: bytes.to_vec() }))
        }
        RecordKind::BlockQTensor => decode_blockq(e, bytes).map(Payload::BlockQ),
        RecordKind::Lut => {
            expect_codec(Codec::Int8.id())?;
            if e.shape != [256] {
                return Err(invalid(name, "table shape must be [256]"));
            }
            want_len(Some(LUT_LEN))?;
            let func = LutFunc::from_id(bytes[0]).ok_or_else(|| invalid(name, format!("unknown function {}", bytes[0])))?;
            let clip = ClipBounds { min: bytes[2] as i8 as i32, max: bytes[3] as i8 as i32 };
            if clip.min >= clip.max {
                return Err(invalid(name, "empty sampling range"));
            }
            let mut values = [0i8; 256];
            for (v, &b) in values.iter_mut().zip(&bytes[5..]) {
                *v = b as i8;
            }
            Ok(Payload::Lut(Lut256 {
                func,
                in_shift: bytes[1] as i8 as i32,
                clip,
                out_shift: bytes[4] as i8 as i32,
                values,
            }))
        }
        RecordKind::Calib => {
            expect_codec(NO_CODEC)?;
            if e.shape != [HISTOGRAM_BINS] {
                return Err(invalid(name, format!("histogram shape must be [{HISTOGRAM_BINS}]")));
            }
            want_len(Some(CALIB_LEN))?;
            let f32_at = |i: usize| f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
            let i32_at = |i: usize| i32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
            let observed_max = f32_at(0);
            if !observed_max.is_finite() || observed_max < 0.0 {
                return Err(invalid(name, "observed max must be finite and non-negative"));
            }
            let flags = bytes[4];
            if flags > 3 {
                return Err(invalid(name, format!("unknown flags {flags:#04x}")));
            }
            let clip = (flags & 1 == 1).then(|| ClipBounds { min: i32_at(5), max: i32_at(9) });
            let threshold = (flags & 2 == 2).then(|| f32_at(13));
            let histogram = bytes[17..]
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            Ok(Payload::Calib(CalibStats { histogram, observed_max, clip, threshold }))
        }
        RecordKind::Config => {
            expect_codec(NO_CODEC)?;
            want_len(if e.shape.len() == 1 { Some(e.shape[0]) } else { None })?;
            let s = std::str::from_utf8(bytes).map_err(|_| invalid(name, "config is not UTF-8"))?;
            Ok(Payload::Config(s.to_string()))
        }
    }
}

fn decode_blockq(e: &Entry, bytes: &[u8]) -> std::result::Result<BlockQTensor, ContainerError> {
    let name = e.name.as_str();
    let codec = Codec::from_id(e.codec)
        .filter(|c| c.is_int())
        .ok_or_else(|| invalid(name, format!("codec id {} is not an integer codec", e.codec)))?;
    if bytes.len() < 6 {
        return Err(invalid(name, "block header is truncated"));
    }
    let block_size = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if block_size == 0 || block_size > MAX_BLOCK_SIZE {
        return Err(invalid(name, format!("block size {block_size} out of range")));
    }
    let clip = ClipBounds { min: bytes[4] as i8 as i32, max: bytes[5] as i8 as i32 }
        .validate(codec)
        .map_err(|err| invalid(name, err.to_string()))?;
    let grid = BlockGrid::for_shape(&e.shape, block_size as usize).map_err(|err| invalid(name, err.to_string()))?;
    let blocks = grid.rows_of_blocks.checked_mul(grid.cols_of_blocks);
    let codes_len = blocks.and_then(|b| b.checked_mul(grid.tile_len()));
    let (Some(blocks), Some(codes_len)) = (blocks, codes_len) else {
        return Err(invalid(name, "grid overflows"));
    };
    let packed = if codec == Codec::Int4 { codes_len.div_ceil(2) } else { codes_len };
    if Some(bytes.len()) != packed.checked_add(blocks).and_then(|n| n.checked_add(6)) {
        return Err(invalid(name, format!("payload of {} bytes does not match the grid", bytes.len())));
    }
    let shifts: Vec<i8> = bytes[6..6 + blocks].iter().map(|&b| b as i8).collect();
    let body = &bytes[6 + blocks..];
    let codes: Vec<i8> = if codec == Codec::Int4 {
        let nibble = |n: u8| ((n << 4) as i8) >> 4;
        let mut c: Vec<i8> = body.iter().flat_map(|&b| [nibble(b & 0x0F), nibble(b >> 4)]).collect();
        if c.len() > codes_len {
            if c[codes_len] != 0 {
                return Err(invalid(name, "non-zero trailing nibble"));
            }
            c.truncate(codes_len);
        }
        c
    } else {
        body.iter().map(|&b| b as i8).collect()
    };
    if let Some(c) = codes.iter().find(|&&c| (c as i32) < clip.min || c as i32 > clip.max) {
        return Err(invalid(name, format!("code {c} outside the clip bounds")));
    }
    let n = grid.tile_len();
    for id in 0..blocks {
        let (br, bc) = grid.block_coords(id);
        let (vr, vc) = grid.valid_extent(br, bc);
        let tile = &codes[id * n..(id + 1) * n];
        let padded = tile.iter().enumerate().any(|(i, &c)| c != 0 && (i / block_size as usize >= vr || i % block_size as usize >= vc));
        if padded {
            return Err(invalid(name, "non-zero code in tile padding"));
        }
    }
    Ok(BlockQTensor { shape: e.shape.clone(), grid, codec, codes, shifts, clip })
}

fn read_entries(bytes: &[u8]) -> std::result::Result<Vec<Entry>, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "header").map_err(|_| ContainerError::BadMagic)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = u16::from_le_bytes(cur.array("header")?);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(cur.array("header")?);
    let mut entries = Vec::new();
    let mut names = HashSet::new();
    for i in 0..count {
        let what = format!("directory entry {i}");
        let name_len = u16::from_le_bytes(cur.array(&what)?) as usize;
        let name = std::str::from_utf8(cur.take(name_len, &what)?)
            .map_err(|_| invalid(&what, "name is not UTF-8"))?
            .to_string();
        let what = format!("directory entry {name:?}");
        let kind = cur.u8(&what)?;
        let rank = cur.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.array(&what)?) as usize);
        }
        let codec = cur.u8(&what)?;
        let offset = u64::from_le_bytes(cur.array(&what)?);
        let length = u64::from_le_bytes(cur.array(&what)?);
        if !names.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }
        entries.push(Entry { name, kind, shape, codec, offset, length });
    }
    let dir_end = cur.pos as u64;
    let file_len = bytes.len() as u64;
    let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let end = e.offset.checked_add(e.length).ok_or_else(|| ContainerError::OutOfBounds(e.name.clone()))?;
        if e.offset < dir_end {
            return Err(ContainerError::OutOfBounds(e.name.clone()));
        }
        if end > file_len {
            return Err(ContainerError::Truncated(format!("payload of record {:?}", e.name)));
        }
        spans.push((e.offset, end, i));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ContainerError::Overlap(entries[w[0].2].name.clone(), entries[w[1].2].name.clone()));
        }
    }
    let used_end = spans.iter().map(|s| s.1).max().unwrap_or(dir_end);
    if used_end < file_len {
        return Err(ContainerError::TrailingBytes((file_len - used_end) as usize));
    }
    Ok(entries)
}

/// Parses a container. Malformed input of any kind yields a
/// [`ContainerError`], never a panic.
pub fn read_container(bytes: &[u8]) -> Result<Vec<Record>> {
    let entries = read_entries(bytes)?;
    entries
        .iter()
        .map(|e| {
            let body = &bytes[e.offset as usize..(e.offset + e.length) as usize];
            let payload = decode_payload(e, body)?;
            Ok(Record { name: e.name.clone(), payload })
        })
        .collect::<std::result::Result<Vec<_>, ContainerError>>()
        .map_err(BctError::from)
}

pub fn save(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    std::fs::write(path, write_container(records)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    read_container(&std::fs::read(path)?)
}
