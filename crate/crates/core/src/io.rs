//! Weight files and raw input tensors.
//!
//! Weight file layout, all integers little-endian:
//!
//! ```text
//! offset 0   b"MVT2"
//! offset 4   u32 format version (1)
//! offset 8   u64 header length in bytes
//! offset 16  JSON header, space-padded so the payload starts on a 64-byte boundary
//! ...        payload: raw f32 tensors, each starting on a 64-byte boundary
//! ```
//!
//! The header holds the model config, the form (`train` or `deploy`), the
//! input normalization constants and one entry per tensor with its dotted
//! name (e.g. `stage2.block3.ffn.expand.main.conv.weight`), dtype, shape and
//! payload byte range. Offsets are relative to the payload start.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Mode;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MVT2";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

/// Per-channel preprocessing applied to `[0, 1]` RGB before inference:
/// `(x − mean) / std` after resizing to `resolution × resolution`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub resolution: usize,
}

impl Normalization {
    pub fn imagenet(resolution: usize) -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            resolution,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub mode: Mode,
    pub normalization: Normalization,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `model` to the weight-file byte layout.
pub fn encode<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    model.collect_params("", &mut params);
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        let byte_len = 4 * p.data.len();
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.shape.clone(),
            byte_offset: offset,
            byte_len,
        });
        offset = align_up(offset + byte_len);
    }
    let header = Header {
        config: model.config().clone(),
        mode: model.mode(),
        normalization: Normalization::imagenet(model.config().input_resolution),
        tensors,
    };
    let mut json = serde_json::to_vec(&header)?;
    json.resize(align_up(PREAMBLE + json.len()) - PREAMBLE, b' ');

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    for (p, e) in params.iter().zip(&header.tensors) {
        out.resize(payload_start + e.byte_offset, 0);
        for v in p.data {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out.resize(payload_start + offset, 0);
    Ok(out)
}

/// Parses and validates the preamble and header, returning the header and
/// the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {header_len} bytes runs past end of file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    header.config.validate()?;
    Ok((header, &bytes[header_end..]))
}

fn check_entries(header: &Header, payload_len: usize) -> Result<()> {
    let mut seen = HashSet::new();
    let mut ranges = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateTensor(e.name.clone()));
        }
        if e.dtype != "f32" {
            return Err(Error::Format(format!("tensor `{}` has dtype {}, expected f32", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != 4 * numel {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {:?} but {} payload bytes",
                e.name, e.shape, e.byte_len
            )));
        }
        if e.byte_offset % ALIGN != 0 {
            return Err(Error::Format(format!("tensor `{}` is not {ALIGN}-byte aligned", e.name)));
        }
        let end = e.byte_offset.checked_add(e.byte_len).unwrap_or(usize::MAX);
        if end > payload_len {
            return Err(Error::Truncated(format!(
                "tensor `{}` ends at byte {end}, payload has {payload_len}",
                e.name
            )));
        }
        ranges.push((e.byte_offset, end, e.name.as_str()));
    }
    ranges.sort_unstable();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Format(format!("tensors `{}` and `{}` overlap", pair[0].2, pair[1].2)));
        }
    }
    Ok(())
}

/// Rebuilds a model from weight-file bytes, checking every tensor against
/// the layout implied by the embedded config.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload) = read_header(bytes)?;
    check_entries(&header, payload.len())?;
    let mut model = Model::<T>::skeleton(&header.config, header.mode)?;
    let entries: HashMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut params = Vec::new();
    model.collect_params_mut("", &mut params);
    if params.len() != entries.len() {
        let expected: HashSet<&str> = params.iter().map(|p| p.name.as_str()).collect();
        let extra = entries.keys().find(|k| !expected.contains(*k));
        let missing = expected.iter().find(|k| !entries.contains_key(*k));
        return Err(Error::Format(format!(
            "tensor set does not match the model: unexpected {extra:?}, missing {missing:?}"
        )));
    }
    for p in params.iter_mut() {
        let e = entries
            .get(p.name.as_str())
            .ok_or_else(|| Error::Format(format!("missing tensor `{}`", p.name)))?;
        if e.shape != p.shape {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                p.name, e.shape, p.shape
            )));
        }
        let raw = &payload[e.byte_offset..e.byte_offset + e.byte_len];
        for (dst, chunk) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tensor `{}`", p.name)));
            }
            *dst = T::from_f64_lossy(v as f64);
        }
        if p.name.ends_with("running_var") && p.data.iter().any(|&v| v < T::zero()) {
            return Err(Error::Format(format!("tensor `{}` has a negative variance", p.name)));
        }
    }
    drop(params);
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode(&std::fs::read(path)?)
}

/// Reads a little-endian f32 NCHW tensor whose byte length must match
/// `shape` exactly.
pub fn read_raw(path: &Path, shape: [usize; 4]) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)?;
    let numel: usize = shape.iter().product();
    if bytes.len() != 4 * numel {
        return Err(Error::Shape(format!(
            "raw input has {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            4 * numel
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_raw(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}
