//! Named-tensor checkpoints and the safetensors-compatible container.
//!
//! Layout on disk: an 8-byte little-endian header length `N`, `N` bytes of
//! UTF-8 JSON mapping tensor name to `{dtype, shape, data_offsets}`, then the
//! concatenated little-endian payload. Offsets are relative to the payload
//! start. An optional `__metadata__` entry carries string-to-string metadata.
//!
//! Only dense `F32` and `F16` tensors are accepted. Everything is held as
//! `f32` in memory; `F16` payloads are upcast exactly on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("non-finite weights in tensor(s): {}", .0.join(", "))]
    NonFiniteWeights(Vec<String>),
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensorName(String),
    #[error("invalid tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// `data.len()` equals the product of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, String> {
        if shape.contains(&0) {
            return Err(format!("shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "vector tensor must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered map of named tensors plus free-form string metadata.
///
/// Iteration is always lexicographic by tensor name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor. Names must be non-empty, unique and not the reserved
    /// metadata key.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
    ) -> Result<(), CheckpointError> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(CheckpointError::InvalidTensor {
                name,
                reason: "reserved or empty tensor name".into(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateTensorName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Builder-style insert for fixtures; panics on invalid names.
    pub fn with(mut self, name: &str, tensor: Tensor) -> Self {
        self.insert(name, tensor).expect("invalid fixture tensor");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names, shapes, metadata and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Names of tensors holding NaN or infinity.
    pub fn non_finite_tensors(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// JSON object that keeps every key in document order and rejects duplicates.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut seen = BTreeSet::new();
                let mut out = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate key:{key}")));
                    }
                    out.push((key, value));
                }
                Ok(HeaderEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::MalformedContainer(msg.into())
}

/// Decodes a container from memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 {
        return Err(malformed(format!(
            "need at least 8 bytes for the header length, got {}",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > (bytes.len() - 8) as u64 {
        return Err(malformed(format!(
            "header length {header_len} exceeds available {} bytes",
            bytes.len() - 8
        )));
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    if !header.trim_start().starts_with('{') {
        return Err(malformed("header is not a JSON object"));
    }
    let entries: HeaderEntries = serde_json::from_str(header).map_err(|e| {
        let msg = e.to_string();
        match msg.strip_prefix("duplicate key:") {
            Some(rest) => {
                let name = rest.split(" at line").next().unwrap_or(rest).to_string();
                CheckpointError::DuplicateTensorName(name)
            }
            None => malformed(format!("header JSON: {msg}")),
        }
    })?;
    let payload = &bytes[header_end..];

    let mut ckpt = Checkpoint::new();
    let mut spans = Vec::new();
    for (name, value) in entries.0 {
        if name == METADATA_KEY {
            ckpt.metadata = serde_json::from_value(value)
                .map_err(|e| malformed(format!("metadata must map strings to strings: {e}")))?;
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| malformed(format!("tensor `{name}` entry: {e}")))?;
        let [begin, end] = entry.data_offsets;
        if entry.shape.contains(&0) {
            return Err(malformed(format!("tensor `{name}` has a zero dimension")));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("tensor `{name}` shape overflows")))?;
        let expected = numel
            .checked_mul(entry.dtype.size())
            .ok_or_else(|| malformed(format!("tensor `{name}` size overflows")))?;
        if begin > end || end - begin != expected {
            return Err(malformed(format!(
                "tensor `{name}` shape {:?} needs {expected} bytes, offsets [{begin}, {end}) give {}",
                entry.shape,
                end.saturating_sub(begin)
            )));
        }
        if end > payload.len() {
            return Err(malformed(format!(
                "tensor `{name}` ends at {end} but payload has {} bytes",
                payload.len()
            )));
        }
        let raw = &payload[begin..end];
        let data: Vec<f32> = match entry.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        spans.push((begin, end, name.clone()));
        let tensor = Tensor::new(entry.shape, data).map_err(malformed)?;
        ckpt.insert(name, tensor)?;
    }

    spans.sort();
    let mut cursor = 0;
    for (begin, end, name) in &spans {
        if *begin < cursor {
            return Err(malformed(format!(
                "tensor `{name}` overlaps a previous tensor"
            )));
        }
        cursor = *end;
    }
    if cursor != payload.len() {
        return Err(malformed(format!(
            "payload has {} bytes but tensors cover {cursor}",
            payload.len()
        )));
    }

    let bad = ckpt.non_finite_tensors();
    if !bad.is_empty() {
        return Err(CheckpointError::NonFiniteWeights(bad));
    }
    Ok(ckpt)
}

/// Encodes with every tensor stored as `F32`. The output is a pure function
/// of the checkpoint contents.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    encode_checkpoint_as(ckpt, Dtype::F32)
}

/// Encodes with every tensor stored as `dtype`. `F16` rounds to nearest and is
/// lossy for values that are not exactly representable.
pub fn encode_checkpoint_as(ckpt: &Checkpoint, dtype: Dtype) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::with_capacity(ckpt.num_params() * dtype.size());
    for (name, tensor) in ckpt.iter() {
        let begin = payload.len();
        match dtype {
            Dtype::F32 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in tensor.data() {
                    payload.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
                }
            }
        }
        let entry = TensorEntry {
            dtype,
            shape: tensor.shape().to_vec(),
            data_offsets: [begin, payload.len()],
        };
        header.insert(
            name.clone(),
            serde_json::to_value(entry).expect("tensor entry serializes"),
        );
    }
    if !ckpt.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&ckpt.metadata).expect("metadata serializes"),
        );
    }
    // serde_json's default map is a BTreeMap, so keys come out sorted.
    let mut header =
        serde_json::to_string(&serde_json::Value::Object(header)).expect("header serializes");
    while !header.len().is_multiple_of(8) {
        header.push(' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    save_checkpoint_as(ckpt, path, Dtype::F32)
}

pub fn save_checkpoint_as(
    ckpt: &Checkpoint,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint_as(ckpt, dtype)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MismatchKind {
    Missing,
    Shape,
    Extra,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mismatch {
    pub name: String,
    pub kind: MismatchKind,
    pub details: String,
}

/// Outcome of [`validate_compatibility`]; `compatible` iff `mismatches` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl CompatReport {
    fn from_mismatches(mut mismatches: Vec<Mismatch>) -> Self {
        mismatches.sort();
        Self {
            compatible: mismatches.is_empty(),
            mismatches,
        }
    }

    /// Distinct tensor names involved in any mismatch.
    pub fn mismatched_names(&self) -> BTreeSet<&str> {
        self.mismatches.iter().map(|m| m.name.as_str()).collect()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return f.write_str("compatible");
        }
        let parts: Vec<String> = self
            .mismatches
            .iter()
            .map(|m| format!("{} ({:?}: {})", m.name, m.kind, m.details))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks that every checkpoint carries the same tensor names with the same
/// shapes. Kinds are reported relative to the first checkpoint: a name it
/// lacks is `Extra`, a name another checkpoint lacks is `Missing`.
pub fn validate_compatibility(checkpoints: &[&Checkpoint]) -> CompatReport {
    let Some((reference, rest)) = checkpoints.split_first() else {
        return CompatReport::from_mismatches(Vec::new());
    };
    let mut mismatches = Vec::new();
    for (offset, other) in rest.iter().enumerate() {
        let idx = offset + 1;
        for (name, tensor) in reference.iter() {
            match other.get(name) {
                None => mismatches.push(Mismatch {
                    name: name.clone(),
                    kind: MismatchKind::Missing,
                    details: format!("absent from checkpoint #{idx}"),
                }),
                Some(t) if t.shape() != tensor.shape() => mismatches.push(Mismatch {
                    name: name.clone(),
                    kind: MismatchKind::Shape,
                    details: format!(
                        "checkpoint #0 has {:?}, checkpoint #{idx} has {:?}",
                        tensor.shape(),
                        t.shape()
                    ),
                }),
                Some(_) => {}
            }
        }
        for name in other.names() {
            if reference.get(name).is_none() {
                mismatches.push(Mismatch {
                    name: name.to_string(),
                    kind: MismatchKind::Extra,
                    details: format!("present only in checkpoint #{idx}"),
                });
            }
        }
    }
    CompatReport::from_mismatches(mismatches)
}
