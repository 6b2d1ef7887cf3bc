//! The safetensors container: an 8-byte little-endian header length, a JSON
//! header, then packed little-endian tensor payloads.
//!
//! ```text
//! ┌──────────────┬──────────────────────┬───────────────────────┐
//! │ u64 LE  (N)  │ N bytes JSON header  │ raw data region       │
//! └──────────────┴──────────────────────┴───────────────────────┘
//! ```
//!
//! The header maps tensor names to `{dtype, shape, data_offsets}` with
//! offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` string map. Entry order is preserved on read and write.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Dtype;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// One entry of the container header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorRecord {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A header entry whose dtype is outside the supported set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub name: String,
    pub dtype: String,
}

/// A fully validated, in-memory container.
#[derive(Debug, Clone)]
pub struct Container {
    pub records: Vec<TensorRecord>,
    pub skipped: Vec<SkippedRecord>,
    pub metadata: BTreeMap<String, String>,
    data: Vec<u8>,
}

impl Container {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "file is {} bytes, too short for the 8-byte header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
            return Err(Error::Format(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header_end = 8 + header_len as usize;
        let header_text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: IndexMap<String, Value> = serde_json::from_str(header_text)
            .map_err(|e| Error::Format(format!("malformed header JSON: {e}")))?;
        let data = bytes[header_end..].to_vec();

        let mut records = Vec::new();
        let mut skipped = Vec::new();
        let mut metadata = BTreeMap::new();
        for (name, entry) in header {
            if name == METADATA_KEY {
                metadata = parse_metadata(&entry)?;
                continue;
            }
            let obj = entry
                .as_object()
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: entry is not an object")))?;
            let dtype_str = obj
                .get("dtype")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: missing dtype")))?;
            let shape = parse_usize_list(obj.get("shape"), &name, "shape")?;
            if shape.contains(&0) {
                return Err(Error::Format(format!(
                    "tensor `{name}`: zero-sized dimension in shape {shape:?}"
                )));
            }
            let offsets = parse_usize_list(obj.get("data_offsets"), &name, "data_offsets")?;
            let [begin, end] = offsets[..] else {
                return Err(Error::Format(format!(
                    "tensor `{name}`: data_offsets must have two entries"
                )));
            };
            if begin > end || end > data.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}`: offsets [{begin}, {end}) fall outside the {}-byte data region (truncated file?)",
                    data.len()
                )));
            }
            match dtype_str.parse::<Dtype>() {
                Ok(dtype) => {
                    let expected = shape
                        .iter()
                        .try_fold(dtype.byte_width(), |acc, &d| acc.checked_mul(d));
                    if expected != Some(end - begin) {
                        return Err(Error::Format(format!(
                            "tensor `{name}`: {} payload bytes do not match {dtype} shape {shape:?}",
                            end - begin
                        )));
                    }
                    records.push(TensorRecord {
                        name,
                        dtype,
                        shape,
                        data_offsets: (begin, end),
                    });
                }
                Err(_) => skipped.push(SkippedRecord {
                    name,
                    dtype: dtype_str.to_string(),
                }),
            }
        }

        let mut spans: Vec<(usize, usize, &str)> = records
            .iter()
            .map(|r| (r.data_offsets.0, r.data_offsets.1, r.name.as_str()))
            .collect();
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::Format(format!(
                    "tensors `{}` and `{}` have overlapping payloads",
                    pair[0].2, pair[1].2
                )));
            }
        }

        Ok(Self {
            records,
            skipped,
            metadata,
            data,
        })
    }

    pub fn payload(&self, record: &TensorRecord) -> &[u8] {
        &self.data[record.data_offsets.0..record.data_offsets.1]
    }
}

fn parse_metadata(value: &Value) -> Result<BTreeMap<String, String>> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format("__metadata__ is not an object".into()))?;
    obj.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(Error::Format(format!(
                "__metadata__ value for `{k}` is not a string"
            ))),
        })
        .collect()
}

fn parse_usize_list(value: Option<&Value>, name: &str, field: &str) -> Result<Vec<usize>> {
    let arr = value
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format(format!("tensor `{name}`: missing {field}")))?;
    arr.iter()
        .map(|v| {
            v.as_u64()
                .and_then(|u| usize::try_from(u).ok())
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: bad {field} entry {v}")))
        })
        .collect()
}

/// A tensor queued for serialization; `bytes` is already encoded in `dtype`.
#[derive(Debug, Clone)]
pub struct TensorPayload {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum HeaderEntry<'a> {
    Metadata(&'a BTreeMap<String, String>),
    Tensor {
        dtype: &'static str,
        shape: &'a [usize],
        data_offsets: [usize; 2],
    },
}

/// Serializes tensors (in the given order) into container bytes.
///
/// The header is padded with spaces to a multiple of 8 bytes.
pub fn serialize_container(
    tensors: &[TensorPayload],
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header: IndexMap<&str, HeaderEntry<'_>> = IndexMap::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY, HeaderEntry::Metadata(metadata));
    }
    let mut offset = 0usize;
    for t in tensors {
        let expected = t.shape.iter().product::<usize>() * t.dtype.byte_width();
        if t.bytes.len() != expected {
            return Err(Error::Format(format!(
                "tensor `{}`: {} payload bytes for {} shape {:?}",
                t.name,
                t.bytes.len(),
                t.dtype,
                t.shape
            )));
        }
        if header.contains_key(t.name.as_str()) || t.name == METADATA_KEY {
            return Err(Error::Format(format!("duplicate tensor name `{}`", t.name)));
        }
        header.insert(
            &t.name,
            HeaderEntry::Tensor {
                dtype: t.dtype.as_str(),
                shape: &t.shape,
                data_offsets: [offset, offset + t.bytes.len()],
            },
        );
        offset += t.bytes.len();
    }

    let mut header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors {
        out.extend_from_slice(&t.bytes);
    }
    Ok(out)
}
