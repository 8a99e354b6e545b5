//! On-disk tensor container and PGM export.
//!
//! Container layout, little-endian throughout:
//! magic `STBT` (4 bytes) | version u8 = 1 | dtype u8 (0 = f32, 1 = u8) |
//! rank u8 (<= 4) | rank x u32 dims | row-major payload.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STBT";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum StbtData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StbtTensor {
    pub dims: Vec<usize>,
    pub data: StbtData,
}

impl StbtTensor {
    pub fn from_f32(t: &Tensor<f32>) -> Self {
        StbtTensor { dims: t.dims().to_vec(), data: StbtData::F32(t.data().to_vec()) }
    }

    /// Quantizes a binary 0/1 tensor to u8 payload.
    pub fn from_binary(t: &Tensor<f32>) -> Result<Self> {
        let mut out = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("binary container value {v} is not 0 or 1")));
            }
            out.push(v as u8);
        }
        Ok(StbtTensor { dims: t.dims().to_vec(), data: StbtData::U8(out) })
    }

    pub fn to_f32(&self) -> Result<Tensor<f32>> {
        let data: Vec<f32> = match &self.data {
            StbtData::F32(v) => v.clone(),
            StbtData::U8(v) => v.iter().map(|&b| b as f32).collect(),
        };
        Tensor::from_vec(self.dims.clone(), data)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Serializes into the container byte layout.
pub fn encode_tensor(t: &StbtTensor) -> Result<Vec<u8>> {
    if t.dims.len() > MAX_RANK || t.dims.is_empty() {
        return Err(Error::Format {
            field: "rank",
            detail: format!("rank {} outside 1..={MAX_RANK}", t.dims.len()),
        });
    }
    let numel = t.numel();
    let (dtype, payload_len) = match &t.data {
        StbtData::F32(v) => (0u8, v.len()),
        StbtData::U8(v) => (1u8, v.len()),
    };
    if payload_len != numel {
        return Err(Error::Format {
            field: "payload",
            detail: format!("dims require {numel} values, payload has {payload_len}"),
        });
    }
    let mut out = Vec::with_capacity(7 + 4 * t.dims.len() + numel * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        StbtData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        StbtData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

/// Parses one container from the front of `bytes`, returning the tensor and
/// the number of bytes consumed. Truncation and malformed headers are format
/// errors naming the offending field; no partial tensor is returned.
pub fn decode_tensor(bytes: &[u8]) -> Result<(StbtTensor, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format { field: "magic", detail: "file shorter than magic".into() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected STBT, got {:?}", &bytes[..4]),
        });
    }
    if bytes.len() < 7 {
        return Err(Error::Format { field: "version", detail: "truncated header".into() });
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(Error::Format { field: "version", detail: format!("unsupported version {version}") });
    }
    let dtype = bytes[5];
    if dtype > 1 {
        return Err(Error::Format { field: "dtype", detail: format!("unknown dtype {dtype}") });
    }
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format { field: "rank", detail: format!("rank {rank} outside 1..={MAX_RANK}") });
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format { field: "dims", detail: "truncated dimension list".into() });
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::Format { field: "dims", detail: "zero-sized dimension".into() });
        }
        dims.push(d);
    }
    let numel: usize = dims.iter().product();
    let elem = if dtype == 0 { 4 } else { 1 };
    let total = header + numel * elem;
    if bytes.len() < total {
        return Err(Error::Format {
            field: "payload",
            detail: format!("need {} payload bytes, found {}", numel * elem, bytes.len() - header),
        });
    }
    let data = if dtype == 0 {
        let mut v = Vec::with_capacity(numel);
        for i in 0..numel {
            let off = header + 4 * i;
            v.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        StbtData::F32(v)
    } else {
        StbtData::U8(bytes[header..total].to_vec())
    };
    Ok((StbtTensor { dims, data }, total))
}

pub fn write_tensor(path: &Path, t: &StbtTensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor(path: &Path) -> Result<StbtTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (t, consumed) = decode_tensor(&bytes)?;
    if consumed != bytes.len() {
        return Err(Error::Format {
            field: "payload",
            detail: format!("{} trailing bytes after tensor", bytes.len() - consumed),
        });
    }
    Ok(t)
}

/// Binary PGM ("P5") with per-map min-max scaling to 0..255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Validation(format!(
            "pgm expects {} values for {width}x{height}, got {}",
            width * height,
            values.len()
        )));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    let mut bytes = Vec::with_capacity(header.len() + values.len());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend(values.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    file.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
