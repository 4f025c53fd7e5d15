//! Versioned tensor containers for model checkpoints and training state.
//!
//! Layout: 4-byte magic, u32 schema, u32 header length, JSON header, then
//! the concatenated little-endian payloads of every entry in header order.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::motion::NormStats;
use crate::param::Module;

const MAGIC: &[u8; 4] = b"IMCK";
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn encode_container(magic: &[u8; 4], schema: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&schema.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Returns `(schema, header, payload)`.
pub(crate) fn decode_container<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(u32, &'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(Error::Format(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let (schema, hlen) = (word(4), word(8) as usize);
    if bytes.len() < 12 + hlen {
        return Err(Error::Format("truncated header".into()));
    }
    Ok((schema, &bytes[12..12 + hlen], &bytes[12 + hlen..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub dtype: Dtype,
    pub model: DenoiserConfig,
    pub norm_stats: NormStats,
    /// Free-form metadata (epoch, step, seeds).
    pub meta: serde_json::Value,
    pub entries: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

impl TensorFile {
    pub fn new(kind: &str, dtype: Dtype, model: DenoiserConfig, norm_stats: NormStats, meta: serde_json::Value) -> Self {
        Self {
            header: Header { kind: kind.to_string(), dtype, model, norm_stats, meta, entries: Vec::new() },
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) {
        self.header.entries.push(TensorEntry { name: name.into(), shape: shape.to_vec() });
        self.values.push(values);
    }

    /// Adds every parameter of `m` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, m: &dyn Module) {
        for p in m.parameters() {
            self.push(format!("{prefix}{}", p.name()), &p.shape(), p.to_vec());
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let i = self.header.entries.iter().position(|e| e.name == name)?;
        Some((&self.header.entries[i].shape, &self.values[i]))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (e, v) in self.header.entries.iter().zip(&self.values) {
            if e.shape.iter().product::<usize>() != v.len() {
                return Err(Error::Data(format!("entry {} has {} values for shape {:?}", e.name, v.len(), e.shape)));
            }
            for &x in v {
                match self.header.dtype {
                    Dtype::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(encode_container(MAGIC, CHECKPOINT_SCHEMA, &serde_json::to_vec(&self.header)?, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (schema, header, mut payload) = decode_container(bytes, MAGIC)?;
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!("checkpoint schema {schema}, this build reads {CHECKPOINT_SCHEMA}")));
        }
        let header: Header = serde_json::from_slice(header)?;
        let size = header.dtype.size();
        let mut values = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            if payload.len() < n * size {
                return Err(Error::Format(format!("payload truncated at entry {}", e.name)));
            }
            let (head, rest) = payload.split_at(n * size);
            values.push(match header.dtype {
                Dtype::F32 => head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
                Dtype::F64 => head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            });
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Self { header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Overwrites every parameter of `m` from entries named `prefix + name`.
    pub fn load_module(&self, prefix: &str, m: &dyn Module) -> Result<()> {
        for p in m.parameters() {
            let name = format!("{prefix}{}", p.name());
            let (shape, values) = self.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if shape != p.shape() {
                return Err(Error::Format(format!("{name}: stored shape {shape:?}, model expects {:?}", p.shape())));
            }
            p.set_data(values.to_vec())?;
        }
        Ok(())
    }
}

/// Model weights as f32, with config and normalization statistics.
pub fn model_checkpoint(model: &Denoiser, stats: &NormStats, meta: serde_json::Value) -> TensorFile {
    let mut f = TensorFile::new("model", Dtype::F32, model.config.clone(), stats.clone(), meta);
    f.push_module("", model);
    f
}

pub fn load_model(path: &Path) -> Result<(Denoiser, TensorFile)> {
    let file = TensorFile::read(path)?;
    if file.header.kind != "model" {
        return Err(Error::Format(format!("{} holds {}, not model weights", path.display(), file.header.kind)));
    }
    let model = Denoiser::new(file.header.model.clone(), 0)?;
    file.load_module("", &model)?;
    Ok((model, file))
}
