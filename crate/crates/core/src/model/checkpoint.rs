//! Flat tensor container: `PALSEGCK`, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PALSEGCK";
const OPTIMIZER_PREFIX: &str = "optimizer/";

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub global_step: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Free-form state owned by the writer (e.g. the trainer).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: Option<ModelConfig>,
    config_hash: Option<String>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
    data_bytes: u64,
    crc32: u32,
}

/// In-memory form of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub model: Option<ModelConfig>,
    pub config_hash: Option<String>,
    pub meta: CheckpointMeta,
    /// Model parameters and buffers by path.
    pub tensors: BTreeMap<String, Tensor<f32>>,
    /// Optimizer state by path.
    pub optimizer: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, &Tensor<f32>)> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(
                self.optimizer
                    .iter()
                    .map(|(k, v)| (format!("{OPTIMIZER_PREFIX}{k}"), v)),
            )
            .collect();
        let mut data = Vec::with_capacity(entries.iter().map(|(_, t)| t.numel() * 4).sum());
        for (_, t) in &entries {
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            dtype: "f32".into(),
            model: self.model.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
            tensors: entries
                .iter()
                .map(|(p, t)| TensorEntry {
                    path: p.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            data_bytes: data.len() as u64,
            crc32: crc32fast::hash(&data),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so readers never observe a partial file
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(MAGIC)
            .and_then(|_| f.write_all(&(json.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&json))
            .and_then(|_| f.write_all(&data))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |why: &str| {
            Error::Checkpoint(format!("{}: integrity check failed: {why}", path.display()))
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
        if header.dtype != "f32" {
            return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
        }
        let data = &bytes[16 + hlen..];
        if data.len() as u64 != header.data_bytes {
            return Err(corrupt(&format!(
                "expected {} data bytes, found {}",
                header.data_bytes,
                data.len()
            )));
        }
        if crc32fast::hash(data) != header.crc32 {
            return Err(corrupt("checksum mismatch"));
        }
        let mut ck = Checkpoint {
            model: header.model,
            config_hash: header.config_hash,
            meta: header.meta,
            ..Default::default()
        };
        let mut offset = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = data
                .get(offset..offset + 4 * n)
                .ok_or_else(|| corrupt("tensor table exceeds data"))?;
            offset += 4 * n;
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&e.shape, values)?;
            match e.path.strip_prefix(OPTIMIZER_PREFIX) {
                Some(p) => ck.optimizer.insert(p.to_string(), t),
                None => ck.tensors.insert(e.path, t),
            };
        }
        if offset != data.len() {
            return Err(corrupt("trailing data"));
        }
        Ok(ck)
    }
}
