//! Flat binary tensor blobs with a JSON sidecar header.
//!
//! `<stem>.bin` holds every tensor back to back as little-endian floats of one
//! dtype; `<stem>.json` lists names, shapes and element offsets plus free-form
//! metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Real;

pub const FORMAT: &str = "foley-blob/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data file.
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: Dtype,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Map<String, Value>,
}

/// In-memory blob; values are kept as `f64` and narrowed on write.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub dtype: Dtype,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub meta: Map<String, Value>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    (PathBuf::from(bin), PathBuf::from(json))
}

impl Blob {
    pub fn new(dtype: Dtype) -> Self {
        Self {
            dtype,
            tensors: Vec::new(),
            meta: Map::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape, data));
    }

    pub fn push_params<T: Real, P: ParamSet<T>>(&mut self, params: &P) {
        for t in params.named() {
            let data = t.data.iter().map(|v| v.f64()).collect();
            self.push(t.name, t.shape, data);
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("blob has no tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    /// Copy matching tensors into `params`; every parameter must be present
    /// with the same shape.
    pub fn load_params<T: Real, P: ParamSet<T>>(&self, params: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        for ((name, shape), dst) in names.iter().zip(params.slices_mut()) {
            let (s, data) = self.require(name)?;
            if s != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name}: stored shape {s:?}, expected {shape:?}"
                )));
            }
            for (d, &v) in dst.iter_mut().zip(data) {
                *d = T::c(v);
            }
        }
        Ok(())
    }

    /// Serialized `(header, data)` bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
            for &v in data {
                match self.dtype {
                    Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = Header {
            format: FORMAT.into(),
            dtype: self.dtype,
            byte_order: "little".into(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&header)
            .map_err(|e| Error::Format(e.to_string()))?;
        json.push(b'\n');
        Ok((json, bytes))
    }

    pub fn decode(header: &[u8], data: &[u8]) -> Result<Self> {
        let header: Header =
            serde_json::from_slice(header).map_err(|e| Error::Format(e.to_string()))?;
        if header.format != FORMAT || header.byte_order != "little" {
            return Err(Error::Format(format!(
                "unsupported blob {} ({})",
                header.format, header.byte_order
            )));
        }
        let w = header.dtype.width();
        let total: usize = header.tensors.iter().map(TensorEntry::len).sum();
        if data.len() != total * w {
            return Err(Error::Format(format!(
                "data holds {} bytes, header describes {}",
                data.len(),
                total * w
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let start = e.offset * w;
            let end = start + e.len() * w;
            if end > data.len() {
                return Err(Error::Format(format!("tensor {} out of bounds", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(w)
                .map(|c| match header.dtype {
                    Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            tensors.push((e.name.clone(), e.shape.clone(), values));
        }
        Ok(Self {
            dtype: header.dtype,
            tensors,
            meta: header.meta,
        })
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let (bin, json) = paths(stem);
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (h, d) = self.encode()?;
        fs::write(&bin, d).map_err(|e| Error::io(&bin, e))?;
        fs::write(&json, h).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (bin, json) = paths(stem);
        let h = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let d = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Self::decode(&h, &d)
    }

    pub fn exists(stem: &Path) -> bool {
        let (bin, json) = paths(stem);
        bin.exists() && json.exists()
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }
}

/// Serialize a parameter set to `(header, data)` bytes.
pub fn serialize_params<T: Real, P: ParamSet<T>>(params: &P, dtype: Dtype) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Blob::new(dtype);
    blob.push_params(params);
    blob.encode()
}
