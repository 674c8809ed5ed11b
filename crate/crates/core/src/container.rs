//! Versioned binary container for meshes, tables, index maps, datasets and
//! checkpoints.
//!
//! Layout: 8 magic bytes, `u32` version, `u64` header length, a JSON header
//! describing the named tensors, then each tensor's little-endian payload in
//! header order. Writing also emits `<file>.json`, a sidecar with counts and
//! the SHA-256 of the container bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GSPHERE\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::U32(_) => Dtype::U32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    U32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, shape: &[usize], data: TensorData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name}: shape does not match data");
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.push(name, shape, TensorData::F64(data));
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        self.push(name, shape, TensorData::U32(data));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("{} container has no tensor '{name}'", self.kind)))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::F64(v) => Ok((&t.shape, v)),
            TensorData::U32(_) => Err(Error::Format(format!("tensor '{name}' is not f64"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<(&[usize], &[u32])> {
        let t = self.get(name)?;
        match &t.data {
            TensorData::U32(v) => Ok((&t.shape, v)),
            TensorData::F64(_) => Err(Error::Format(format!("tensor '{name}' is not u32"))),
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a {kind} container, found {}", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a gaugesphere container (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated header"))?;
        let hbytes = body.get(..hlen).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let mut cursor = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let size = n * th.dtype.width();
            if cursor.len() < size {
                return Err(Error::Format(format!("tensor '{}' is truncated", th.name)));
            }
            let (raw, rest) = cursor.split_at(size);
            cursor = rest;
            let data = match th.dtype {
                Dtype::F64 => TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                Dtype::U32 => TensorData::U32(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
        }
        if !cursor.is_empty() {
            return Err(fail("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    fn sidecar(&self, bytes: &[u8]) -> Value {
        json!({
            "format": "gaugesphere-container",
            "version": VERSION,
            "kind": self.kind,
            "bytes": bytes.len(),
            "sha256": hex::encode(Sha256::digest(bytes)),
            "meta": self.meta,
            "tensors": self.tensors.iter().map(|t| json!({
                "name": t.name,
                "dtype": t.data.dtype(),
                "shape": t.shape,
                "count": t.data.len(),
            })).collect::<Vec<_>>(),
        })
    }

    /// Write the container and its JSON sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        let side = serde_json::to_string_pretty(&self.sidecar(&bytes)).expect("sidecar serializes");
        fs::write(sidecar_path(path), side)?;
        Ok(())
    }

    /// Read a container, verifying the sidecar checksum when one exists.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let side = sidecar_path(path);
        if side.exists() {
            let v: Value = serde_json::from_str(&fs::read_to_string(&side)?)
                .map_err(|e| Error::Format(format!("bad sidecar {}: {e}", side.display())))?;
            let expected = v.get("sha256").and_then(Value::as_str).unwrap_or_default();
            if expected != hex::encode(Sha256::digest(&bytes)) {
                return Err(Error::Format(format!("checksum mismatch for {}", path.display())));
            }
        }
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", json!({"rank": 2}));
        c.push_f64("x", &[2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300]);
        c.push_u32("i", &[4], vec![0, 1, u32::MAX, 7]);
        c
    }

    #[test]
    fn round_trip_through_bytes() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(c.to_bytes(), sample().to_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(Container::from_bytes(&v).is_err());
    }

    #[test]
    fn file_round_trip_checks_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gsph");
        sample().write(&path).unwrap();
        assert_eq!(Container::read(&path).unwrap(), sample());
        let side: Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["tensors"][0]["count"], 6);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Container::read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn typed_access_checks_dtype() {
        let c = sample();
        assert!(c.f64("x").is_ok());
        assert!(c.u32("x").is_err());
        assert!(c.get("missing").is_err());
        assert!(c.expect_kind("mesh").is_err());
    }
}
