//! Minimal reader/writer for the safetensors container: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then the raw little-endian data.
//!
//! Reads are lazy: only the header is parsed up front and each tensor is
//! read from disk on request, converted to f32.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAX_HEADER: u64 = 100 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data_offsets: [u64; 2],
}

impl TensorInfo {
    fn elem_size(&self) -> Option<usize> {
        match self.dtype.as_str() {
            "F64" => Some(8),
            "F32" => Some(4),
            "F16" | "BF16" => Some(2),
            _ => None,
        }
    }
}

/// Parsed header of a safetensors file on disk.
#[derive(Debug)]
pub struct SafeTensors {
    path: PathBuf,
    data_start: u64,
    tensors: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
}

impl SafeTensors {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut len = [0u8; 8];
        f.read_exact(&mut len).map_err(|e| Error::io(&path, e))?;
        let n = u64::from_le_bytes(len);
        if n > MAX_HEADER {
            return Err(Error::Format { path, reason: format!("header length {n} too large") });
        }
        let mut header = vec![0u8; n as usize];
        f.read_exact(&mut header).map_err(|e| Error::io(&path, e))?;
        let (tensors, metadata) = parse_header(&header, &path)?;
        Ok(SafeTensors { path, data_start: 8 + n, tensors, metadata })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Reads one tensor, converting to f32.
    pub fn tensor(&self, name: &str) -> Result<ArrayD<f32>> {
        let info = self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            path: self.path.clone(),
            name: name.to_string(),
        })?;
        if info.elem_size().is_none() {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("unsupported dtype {} for `{name}`", info.dtype),
            });
        }
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(self.data_start + info.data_offsets[0]))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut raw = vec![0u8; (info.data_offsets[1] - info.data_offsets[0]) as usize];
        f.read_exact(&mut raw).map_err(|e| Error::io(&self.path, e))?;
        let data = decode(&info.dtype, &raw);
        ArrayD::from_shape_vec(IxDyn(&info.shape), data).map_err(|e| Error::Format {
            path: self.path.clone(),
            reason: e.to_string(),
        })
    }
}

type Header = (BTreeMap<String, TensorInfo>, BTreeMap<String, String>);

fn parse_header(header: &[u8], path: &Path) -> Result<Header> {
    let parsed: BTreeMap<String, Value> = serde_json::from_slice(header)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut tensors = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for (name, value) in parsed {
        if name == "__metadata__" {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("tensor `{name}`: {e}"),
        })?;
        let expected = info.shape.iter().product::<usize>() * info.elem_size().unwrap_or(0);
        if info.data_offsets[1] < info.data_offsets[0]
            || (info.elem_size().is_some()
                && (info.data_offsets[1] - info.data_offsets[0]) as usize != expected)
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("tensor `{name}` has inconsistent offsets"),
            });
        }
        tensors.insert(name, info);
    }
    Ok((tensors, metadata))
}

fn decode(dtype: &str, raw: &[u8]) -> Vec<f32> {
    match dtype {
        "F32" => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        "F64" => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        "F16" => raw
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        "BF16" => raw
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => panic!("decode called with unsupported dtype {other}"),
    }
}

/// Parses an in-memory container. `origin` is only used in error messages.
pub fn deserialize(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let bad = |reason: &str| Error::Format { path: origin.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if n > MAX_HEADER || 8 + n as usize > bytes.len() {
        return Err(bad("bad header length"));
    }
    let (tensors, _) = parse_header(&bytes[8..8 + n as usize], origin)?;
    let data = &bytes[8 + n as usize..];
    let mut out = BTreeMap::new();
    for (name, info) in tensors {
        if info.elem_size().is_none() {
            return Err(bad(&format!("unsupported dtype {}", info.dtype)));
        }
        let [a, b] = info.data_offsets;
        let raw = data.get(a as usize..b as usize).ok_or_else(|| bad("tensor data out of range"))?;
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), decode(&info.dtype, raw))
            .map_err(|e| bad(&e.to_string()))?;
        out.insert(name, arr);
    }
    Ok(out)
}

/// Serializes f32 tensors into safetensors bytes. Tensors are laid out in
/// name order and the header is padded to an 8-byte boundary, so equal
/// inputs give equal bytes.
pub fn serialize_f32(
    tensors: &[(&str, &[usize], &[f32])],
    metadata: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut sorted: Vec<_> = tensors.iter().collect();
    sorted.sort_by_key(|t| t.0);
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), serde_json::to_value(metadata).unwrap());
    }
    let mut offset = 0u64;
    for (name, shape, data) in &sorted {
        let end = offset + 4 * data.len() as u64;
        let info = TensorInfo { dtype: "F32".into(), shape: shape.to_vec(), data_offsets: [offset, end] };
        header.insert(name.to_string(), serde_json::to_value(info).unwrap());
        offset = end;
    }
    let mut head = serde_json::to_vec(&header).unwrap();
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + offset as usize);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, _, data) in &sorted {
        for x in data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn write_f32(
    path: impl AsRef<Path>,
    tensors: &[(&str, &[usize], &[f32])],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_f32(tensors, metadata);
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.safetensors");
        let a = [1.0f32, -2.5, 3.25, 0.0, 7.0, 8.0];
        let b = [0.5f32];
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        write_f32(&p, &[("b", &[1], &b), ("a", &[2, 3], &a)], &meta).unwrap();
        let st = SafeTensors::open(&p).unwrap();
        assert_eq!(st.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(st.metadata().get("format").map(String::as_str), Some("pt"));
        let ta = st.tensor("a").unwrap();
        assert_eq!(ta.shape(), &[2, 3]);
        assert_eq!(ta.as_slice().unwrap(), &a);
        assert!(matches!(st.tensor("zz"), Err(Error::MissingTensor { .. })));
    }

    #[test]
    fn reads_half_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.safetensors");
        let vals = [1.5f32, -0.25];
        let header = r#"{"x":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"y":{"dtype":"BF16","shape":[2],"data_offsets":[4,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        for v in vals {
            bytes.extend_from_slice(&half::f16::from_f32(v).to_le_bytes());
        }
        for v in vals {
            bytes.extend_from_slice(&half::bf16::from_f32(v).to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        let st = SafeTensors::open(&p).unwrap();
        assert_eq!(st.tensor("x").unwrap().as_slice().unwrap(), &vals);
        assert_eq!(st.tensor("y").unwrap().as_slice().unwrap(), &vals);
    }

    #[test]
    fn rejects_bad_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        let header = r#"{"x":{"dtype":"F32","shape":[3],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(SafeTensors::open(&p), Err(Error::Format { .. })));
    }
}
