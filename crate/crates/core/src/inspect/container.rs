//! Named-tensor container.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, then `N` bytes of
//! JSON mapping each tensor name to
//! `{"dtype": "F64", "shape": [...], "data_offsets": [begin, end]}` plus a
//! `"__metadata__"` string map, then the concatenated little-endian payload.
//! Offsets are relative to the start of the payload. The writer emits only
//! `F64`, sorted by name, with no padding; the reader also accepts `F32`
//! payloads and widens them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D tensors map directly; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.data.clone()),
            [n] => Matrix::from_vec(1, *n, self.data.clone()),
            other => Err(Error::Shape(format!("expected a 1-D or 2-D tensor, got shape {other:?}"))),
        }
    }

    fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        let shape = vec![m.rows(), m.cols()];
        Self {
            shape,
            data: m.into_vec(),
        }
    }
}

/// Name → tensor collection with string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: impl Into<Tensor>) {
        self.tensors.insert(name.into(), tensor.into());
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensor(name)?.to_matrix()
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::MissingTensor(format!("metadata `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::InvalidParameter(format!("metadata `{key}` = `{raw}` is not a count")))
    }

    /// Equality on the bit patterns of every value.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Total payload bytes when written.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.values().map(|t| t.numel() * 8).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header: BTreeMap<String, Value> = BTreeMap::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.numel() * 8;
            header.insert(
                name.clone(),
                json!({ "dtype": "F64", "shape": t.shape, "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        header.insert(METADATA_KEY.to_string(), json!(self.metadata));
        let header = serde_json::to_vec(&header).expect("header serialization cannot fail");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::CorruptHeader(format!(
                "file is {} bytes, shorter than the length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if n > available {
            return Err(Error::CorruptHeader(format!(
                "header length {n} exceeds the {available} bytes after the prefix"
            )));
        }
        let n = n as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n])
            .map_err(|e| Error::CorruptHeader(format!("invalid JSON: {e}")))?;
        let Value::Object(entries) = header else {
            return Err(Error::CorruptHeader("header is not a JSON object".into()));
        };
        let payload = &bytes[8 + n..];

        let mut metadata = BTreeMap::new();
        let mut specs = Vec::new();
        for (name, entry) in entries {
            if name == METADATA_KEY {
                let Value::Object(map) = entry else {
                    return Err(Error::CorruptHeader("__metadata__ is not an object".into()));
                };
                for (k, v) in map {
                    let Value::String(s) = v else {
                        return Err(Error::CorruptHeader(format!("metadata `{k}` is not a string")));
                    };
                    metadata.insert(k, s);
                }
                continue;
            }
            specs.push(parse_entry(name, &entry)?);
        }

        specs.sort_by_key(|s| (s.begin, s.end));
        let mut cursor = 0usize;
        for s in &specs {
            if s.begin != cursor {
                return Err(Error::OffsetOverlap(format!(
                    "`{}` starts at {} but the previous tensor ends at {cursor}",
                    s.name, s.begin
                )));
            }
            cursor = s.end;
        }
        if cursor > payload.len() {
            return Err(Error::TruncatedPayload(format!(
                "tensors need {cursor} payload bytes, file has {}",
                payload.len()
            )));
        }
        if cursor < payload.len() {
            return Err(Error::CorruptHeader(format!(
                "{} trailing payload bytes not covered by any tensor",
                payload.len() - cursor
            )));
        }

        let mut tensors = BTreeMap::new();
        for s in specs {
            let raw = &payload[s.begin..s.end];
            let data: Vec<f64> = match s.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.insert(s.name, Tensor { shape: s.shape, data });
        }
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Clone, Copy)]
enum Dtype {
    F64,
    F32,
}

struct EntrySpec {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: String, entry: &Value) -> Result<EntrySpec> {
    let bad = |what: &str| Error::CorruptHeader(format!("tensor `{name}`: {what}"));
    let dtype = match entry.get("dtype").and_then(Value::as_str) {
        Some("F64") => Dtype::F64,
        Some("F32") => Dtype::F32,
        Some(other) => return Err(Error::UnknownDtype(other.to_string())),
        None => return Err(bad("missing dtype")),
    };
    let shape = entry
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape entries must be non-negative integers"))?;
    let offsets = entry
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(bad("data_offsets must have two entries"));
    };
    let (Some(begin), Some(end)) = (begin.as_u64(), end.as_u64()) else {
        return Err(bad("data_offsets must be non-negative integers"));
    };
    let (begin, end) = (begin as usize, end as usize);
    if end < begin {
        return Err(bad("data_offsets end before begin"));
    }
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| bad("shape overflows"))?;
    if numel.checked_mul(width) != Some(end - begin) {
        return Err(bad("byte range does not match shape and dtype"));
    }
    Ok(EntrySpec {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}
