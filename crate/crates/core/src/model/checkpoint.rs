//! Single-file tensor container: an 8-byte little-endian header length, a
//! JSON header, then the raw little-endian payload.
//!
//! ```text
//! [u64 n][n bytes JSON header][payload]
//! header = { "<tensor>": {"dtype": "f32", "shape": [..], "offsets": [start, end]},
//!            "__metadata__": {...} }
//! ```
//! Offsets are relative to the start of the payload, ascending and
//! contiguous in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use saap_autodiff::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::params::Model;
use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";
pub const MODEL_FORMAT: &str = "saap-model";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on header size; anything larger is treated as corruption.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offsets: [u64; 2],
}

/// One raw entry of a container.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Byte length implied by dtype and shape. Packed grouped-quantization
/// entries (`u2-grouped` … `u8-grouped`) carry their own layout and are
/// validated by their reader.
fn expected_len(dtype: &str, shape: &[usize]) -> Result<Option<usize>> {
    let n: usize = shape.iter().product();
    match dtype {
        "u8" => Ok(Some(n)),
        "f32" => Ok(Some(4 * n)),
        "f64" => Ok(Some(8 * n)),
        "u2-grouped" | "u3-grouped" | "u4-grouped" | "u5-grouped" | "u6-grouped" | "u7-grouped"
        | "u8-grouped" => Ok(None),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

/// Serializes entries (in name order) and metadata into container bytes.
pub fn encode_container(metadata: &Value, entries: &BTreeMap<String, RawEntry>) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    header.insert(METADATA_KEY.to_string(), metadata.clone());
    let mut offset = 0u64;
    for (name, e) in entries {
        if name == METADATA_KEY {
            return Err(Error::Checkpoint(format!("reserved tensor name `{name}`")));
        }
        let expected = expected_len(&e.dtype, &e.shape)?;
        if expected.is_some_and(|n| n != e.bytes.len()) {
            return Err(Error::Checkpoint(format!(
                "`{name}` has {} bytes, shape {:?} needs {}",
                e.bytes.len(),
                e.shape,
                expected.unwrap_or_default()
            )));
        }
        let end = offset + e.bytes.len() as u64;
        let h = EntryHeader {
            dtype: e.dtype.clone(),
            shape: e.shape.clone(),
            offsets: [offset, end],
        };
        header.insert(name.clone(), serde_json::to_value(h)?);
        offset = end;
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for e in entries.values() {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

/// Parses and validates container bytes.
pub fn decode_container(bytes: &[u8]) -> Result<(Value, BTreeMap<String, RawEntry>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| Error::Checkpoint("file shorter than the header-length prefix".into()))?
        .try_into()
        .expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_BYTES || header_len > (bytes.len() - 8) as u64 {
        return Err(Error::Checkpoint(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: BTreeMap<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    let payload = &bytes[header_end..];

    let metadata = header.get(METADATA_KEY).cloned().unwrap_or(Value::Null);
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut entries = BTreeMap::new();
    for (name, v) in header {
        if name == METADATA_KEY {
            continue;
        }
        let h: EntryHeader = serde_json::from_value(v)
            .map_err(|e| Error::Checkpoint(format!("bad entry `{name}`: {e}")))?;
        let expected = expected_len(&h.dtype, &h.shape)?;
        let [start, end] = h.offsets;
        if start > end || end > payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "`{name}` spans {start}..{end} but payload has {} bytes",
                payload.len()
            )));
        }
        if expected.is_some_and(|n| n as u64 != end - start) {
            return Err(Error::Checkpoint(format!(
                "`{name}` byte length does not match shape {:?}",
                h.shape
            )));
        }
        spans.push((start, end, name.clone()));
        entries.insert(
            name,
            RawEntry {
                dtype: h.dtype,
                shape: h.shape,
                bytes: payload[start as usize..end as usize].to_vec(),
            },
        );
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Checkpoint(format!(
                "`{}` and `{}` overlap",
                w[0].2, w[1].2
            )));
        }
    }
    Ok((metadata, entries))
}

#[derive(Serialize, Deserialize)]
struct ModelMetadata {
    format: String,
    version: u32,
    dtype: DType,
    config: ModelConfig,
}

pub fn encode_model<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let meta = ModelMetadata {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: model.config.clone(),
    };
    let entries = model
        .params()
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                RawEntry {
                    dtype: T::DTYPE.name().to_string(),
                    shape: t.shape().to_vec(),
                    bytes: t.to_le_bytes(),
                },
            )
        })
        .collect();
    encode_container(&serde_json::to_value(meta)?, &entries)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (meta, entries) = decode_container(bytes)?;
    let meta: ModelMetadata = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("missing or invalid model metadata: {e}")))?;
    if meta.format != MODEL_FORMAT {
        return Err(Error::Checkpoint(format!("not a model checkpoint (`{}`)", meta.format)));
    }
    if meta.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, {} requested",
            meta.dtype,
            T::DTYPE
        )));
    }
    let mut params = BTreeMap::new();
    for (name, e) in entries {
        if e.dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!("`{name}` has dtype {}", e.dtype)));
        }
        params.insert(name, Tensor::from_le_bytes(e.shape, &e.bytes)?);
    }
    Model::from_parts(meta.config, params)
}

/// Element type stored in a model checkpoint.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let (meta, _) = decode_container(&fs::read(path)?)?;
    let meta: ModelMetadata = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("missing or invalid model metadata: {e}")))?;
    Ok(meta.dtype)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_model(&fs::read(path)?)
}
