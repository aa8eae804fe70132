//! Checkpoint container.
//!
//! Layout: one line of compact JSON (the header) terminated by `\n`, then the
//! raw little-endian payload of every tensor, concatenated in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamClass;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ParamClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub entries: Vec<(TensorEntry, Tensor)>,
    /// Free-form JSON (model config, training state).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(dtype: Dtype, metadata: serde_json::Value) -> Self {
        Self { dtype, entries: Vec::new(), metadata }
    }

    pub fn push(&mut self, name: impl Into<String>, class: Option<ParamClass>, tensor: Tensor) {
        let entry = TensorEntry { name: name.into(), shape: tensor.shape().to_vec(), class };
        self.entries.push((entry, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(e, _)| e.name == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: self.dtype,
            tensors: self.entries.iter().map(|(e, _)| e.clone()).collect(),
            metadata: self.metadata.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for (_, t) in &self.entries {
            for &x in t.data() {
                match self.dtype {
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl =
            bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        let width = header.dtype.width();
        let mut offset = nl + 1;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = offset + n * width;
            if end > bytes.len() {
                return Err(Error::Format(format!("payload of {} is truncated", e.name)));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))),
                })
                .collect();
            offset = end;
            let t = Tensor::new(e.shape.clone(), data)?;
            entries.push((e, t));
        }
        if offset != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { dtype: header.dtype, entries, metadata: header.metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
