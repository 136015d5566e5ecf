//! Tensor container shared by checkpoints and cache snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   "BCNKV\0\0\x01"
//! header_len  u64
//! header      header_len bytes of UTF-8 JSON
//! data        concatenated raw tensor bytes
//! ```
//!
//! The header is `{"kind", "config", "meta", "tensors": [{"name", "dtype",
//! "shape", "offset", "nbytes"}]}` with offsets relative to the start of
//! the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"BCNKV\0\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Container<T> {
    pub kind: String,
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut data = Vec::new();
        for (name, t) in &self.tensors {
            let offset = data.len() as u64;
            t.data().iter().for_each(|x| x.extend_le(&mut data));
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: data.len() as u64 - offset,
            });
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_header(bytes)?;
        let data_start =
            16 + u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "{}: dtype {} but reading {}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes as usize != n * T::BYTES {
                return Err(Error::Format(format!(
                    "{}: {} bytes for shape {:?}",
                    e.name, e.nbytes, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start + e.nbytes as usize;
            let raw = data
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("{}: data out of bounds", e.name)))?;
            let values = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }
}

/// Parses only the header, without touching tensor bytes.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a beaconkv container (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trips(
            a in prop::collection::vec(-1e6f32..1e6, 6),
            b in prop::collection::vec(-1e3f32..1e3, 1..20),
        ) {
            let n = b.len();
            let c = Container {
                kind: "test".into(),
                config: ModelConfig::default(),
                meta: serde_json::json!({"m": 3}),
                tensors: vec![
                    ("x".into(), Tensor::new(vec![2, 3], a).unwrap()),
                    ("y".into(), Tensor::new(vec![n], b).unwrap()),
                ],
            };
            let bytes = c.to_bytes().unwrap();
            let back = Container::<f32>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.tensors, &c.tensors);
            prop_assert_eq!(&back.meta, &c.meta);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_garbage_and_wrong_dtype() {
        assert!(Container::<f32>::from_bytes(b"nonsense-bytes-here").is_err());
        let c = Container {
            kind: "t".into(),
            config: ModelConfig::default(),
            meta: serde_json::Value::Null,
            tensors: vec![("x".into(), Tensor::<f64>::zeros(&[2]))],
        };
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(
            Container::<f32>::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
