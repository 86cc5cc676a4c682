//! Checkpoint layout:
//!
//! ```text
//! "RRMCKPT1" | u32 LE version | u64 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header carries the descriptor, provenance and the name/shape of every
//! parameter in payload order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, Model, Param, Provenance};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RRMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    descriptor: ArchDescriptor,
    provenance: Provenance,
    frozen: bool,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn encode(model: &Model) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        descriptor: model.desc.clone(),
        provenance: model.provenance.clone(),
        frozen: model.frozen,
        params: model
            .params
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let payload_len: usize = model.params.iter().map(|p| p.value.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload_len);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    let truncated = |expected: usize| CheckpointError::Truncated { expected, found: bytes.len() };
    if bytes.len() < 8 {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) { truncated(8) } else { CheckpointError::BadMagic }.into());
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < 20 {
        return Err(truncated(20).into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION }.into());
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < header_end {
        return Err(truncated(header_end).into());
    }
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::Version { found: header.format_version, expected: CHECKPOINT_VERSION }.into());
    }
    let expected = header.descriptor.param_shapes().map_err(|e| CheckpointError::Header(e.to_string()))?;
    if expected.len() != header.params.len() {
        return Err(CheckpointError::ParamMismatch {
            name: "*".into(),
            detail: format!("descriptor defines {} tensors, header lists {}", expected.len(), header.params.len()),
        }
        .into());
    }
    for ((name, shape), entry) in expected.iter().zip(&header.params) {
        if *name != entry.name || *shape != entry.shape {
            return Err(CheckpointError::ParamMismatch {
                name: entry.name.clone(),
                detail: format!("expected `{name}` with shape {shape:?}, found shape {:?}", entry.shape),
            }
            .into());
        }
    }
    let payload_len: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>() * 8).sum();
    let end = header_end + payload_len;
    if bytes.len() < end {
        return Err(truncated(end).into());
    }
    if bytes.len() > end {
        return Err(CheckpointError::Trailing(bytes.len() - end).into());
    }
    let mut cursor = header_end;
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let data =
            bytes[cursor..cursor + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        cursor += n * 8;
        let value = Tensor::new(entry.shape, data)
            .map_err(|e| CheckpointError::ParamMismatch { name: entry.name.clone(), detail: e.to_string() })?;
        params.push(Param { name: entry.name, value });
    }
    let mut model = Model::from_parts(header.descriptor, params);
    model.frozen = header.frozen;
    model.provenance = header.provenance;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
