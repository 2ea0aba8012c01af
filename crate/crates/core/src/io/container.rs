//! The tensor container: 8-byte little-endian header length, a JSON header
//! mapping tensor names to dtype/shape/offsets (plus an optional
//! `__metadata__` string map), then the raw little-endian payload.
//!
//! Reads are validated by the `safetensors` crate. Writes are done here so
//! that header keys (tensor names and metadata) always come out sorted and a
//! given input always produces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Storage precision of a tensor as found on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
    BF16,
    F64,
}

/// A decoded tensor, promoted to f64, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, TensorData>,
    pub metadata: BTreeMap<String, String>,
}

/// A tensor queued for writing. Everything is written as F32.
#[derive(Debug, Clone, PartialEq)]
pub struct OutTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl OutTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    let malformed = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| malformed(describe(&e)))?;
    let file = SafeTensors::deserialize(bytes).map_err(|e| malformed(describe(&e)))?;

    let metadata = header
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();

    let mut tensors = BTreeMap::new();
    for (name, view) in file.iter() {
        let raw = view.data();
        let (precision, values): (Precision, Vec<f64>) = match view.dtype() {
            Dtype::F32 => (
                Precision::F32,
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            ),
            Dtype::F16 => (
                Precision::F16,
                raw.chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect(),
            ),
            Dtype::BF16 => (
                Precision::BF16,
                raw.chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect(),
            ),
            Dtype::F64 => (
                Precision::F64,
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            other => {
                return Err(malformed(format!(
                    "tensor {name} has unsupported dtype {other:?}"
                )))
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        tensors.insert(
            name.to_string(),
            TensorData {
                shape: view.shape().to_vec(),
                precision,
                values,
            },
        );
    }
    Ok(Container { tensors, metadata })
}

fn describe(e: &safetensors::SafeTensorError) -> String {
    use safetensors::SafeTensorError as E;
    match e {
        E::HeaderTooSmall | E::InvalidHeaderLength | E::HeaderTooLarge => {
            format!("malformed header length ({e:?})")
        }
        E::InvalidHeader(_) | E::InvalidHeaderStart | E::InvalidHeaderDeserialization(_) => {
            format!("header JSON parse failure ({e:?})")
        }
        other => format!("{other:?}"),
    }
}

pub fn encode(
    tensors: &BTreeMap<String, OutTensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert("__metadata__".to_string(), Value::Object(meta));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
        let end = offset + t.data.len() * 4;
        header.insert(
            name.clone(),
            json!({ "dtype": "F32", "shape": t.shape, "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    let mut header_bytes =
        serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    let padded = header_bytes.len().next_multiple_of(8);
    header_bytes.resize(padded, b' ');

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write(
    path: &Path,
    tensors: &BTreeMap<String, OutTensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Raw payload bytes of one tensor, for byte-level comparisons.
pub fn tensor_bytes(bytes: &[u8], name: &str) -> Option<Vec<u8>> {
    let file = SafeTensors::deserialize(bytes).ok()?;
    file.tensor(name).ok().map(|v| v.data().to_vec())
}
