// Tensor container layout:
//
//   [u64 LE header length N][N bytes JSON header][payload]
//
// The header maps each tensor name to {"dtype", "shape", "data_offsets": [begin, end)} with
// offsets relative to the payload start. The reserved "__metadata__" key holds a string map.
// Tensors are written contiguously in checkpoint order; the header is space-padded to a
// multiple of 8 bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use half::{bf16, f16};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{Checkpoint, DType, Tensor};
use crate::error::{LarvError, Result};

const METADATA_KEY: &str = "__metadata__";

/// On-disk element type used when saving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SaveDtype {
    /// Everything as 32-bit floats.
    #[default]
    F32,
    /// Each tensor in its own `Tensor::dtype`.
    Source,
}

/// Reads a checkpoint. 16-bit floats are up-converted to `f32`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LarvError::io(path, e))?;
    from_bytes(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with(ckpt, path, SaveDtype::F32)
}

pub fn save_checkpoint_with(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    dtype: SaveDtype,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(ckpt, dtype)?;
    std::fs::write(path, bytes).map_err(|e| LarvError::io(path, e))
}

/// Serializes a checkpoint into the container format.
pub fn to_bytes(ckpt: &Checkpoint, dtype: SaveDtype) -> Result<Vec<u8>> {
    let mut header = Map::new();
    if !ckpt.meta.is_empty() {
        header.insert(METADATA_KEY.into(), json!(ckpt.meta));
    }
    let mut payload = Vec::new();
    for (name, tensor) in &ckpt.tensors {
        let target = match dtype {
            SaveDtype::F32 => DType::F32,
            SaveDtype::Source => tensor.dtype,
        };
        let begin = payload.len();
        encode(tensor.data(), target, &mut payload);
        header.insert(
            name.clone(),
            json!({
                "dtype": target.as_str(),
                "shape": tensor.shape(),
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| LarvError::MalformedHeader(e.to_string()))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn encode(data: &[f32], dtype: DType, out: &mut Vec<u8>) {
    out.reserve(data.len() * dtype.size_in_bytes());
    match dtype {
        DType::F32 => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F16 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        DType::BF16 => data
            .iter()
            .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
    }
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Header entries in file order, keeping duplicates so they can be reported.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: String, value: &Value) -> Result<Entry> {
    let bad = |reason: &str| LarvError::MalformedTensor {
        name: name.clone(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field `dtype`"))?;
    let dtype = DType::parse(dtype_str).ok_or_else(|| LarvError::UnsupportedDtype {
        name: name.clone(),
        dtype: dtype_str.to_string(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing array field `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(bad("shape must be non-empty with positive dimensions"));
    }
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| bad("`data_offsets` must be [begin, end]"))?;
    let (begin, end) = offsets;
    if end < begin {
        return Err(bad("`data_offsets` end precedes begin"));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    if end - begin != numel * dtype.size_in_bytes() {
        return Err(bad(&format!(
            "byte range {} does not match shape {:?} of {}",
            end - begin,
            shape,
            dtype
        )));
    }
    Ok(Entry {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(LarvError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = 8u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            LarvError::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })? as usize;
    let header: RawHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| LarvError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, value) in header.0 {
        if !seen.insert(name.clone()) {
            return Err(LarvError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            meta = serde_json::from_value(value).map_err(|e| {
                LarvError::MalformedHeader(format!("`{METADATA_KEY}` must map strings to strings: {e}"))
            })?;
            continue;
        }
        entries.push(parse_entry(name, &value)?);
    }
    entries.sort_by_key(|e| (e.begin, e.end));

    let mut covered = 0usize;
    for e in &entries {
        if e.end > payload.len() {
            return Err(LarvError::TruncatedPayload {
                name: e.name.clone(),
                needed: e.end,
                available: payload.len(),
            });
        }
        if e.begin < covered {
            return Err(LarvError::MalformedTensor {
                name: e.name.clone(),
                reason: "byte range overlaps another tensor".into(),
            });
        }
        covered = e.end;
    }
    if covered != payload.len() {
        return Err(LarvError::MalformedHeader(format!(
            "header describes {covered} payload bytes but the payload has {}",
            payload.len()
        )));
    }

    let mut ckpt = Checkpoint {
        meta,
        ..Checkpoint::default()
    };
    for e in entries {
        let data = decode(&payload[e.begin..e.end], e.dtype);
        let tensor = Tensor::with_dtype(e.dtype, e.shape, data)?;
        ckpt.insert(e.name, tensor)?;
    }
    Ok(ckpt)
}
