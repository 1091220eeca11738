//! Checkpoint container: "DAMPCKPT1" magic, a u64-LE length-prefixed UTF-8
//! JSON header describing each tensor (name, dtype, shape, byte offset into
//! the payload), then raw little-endian f64 payloads in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::graph::ParamSet;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"DAMPCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: expected DAMPCKPT1")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("header error: {0}")]
    Header(String),
    #[error("length mismatch: file has {actual} payload bytes, header implies {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    config: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let header = Header {
        config: config.clone(),
        tensors: entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut buf = Vec::with_capacity(9 + 8 + header_json.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in params.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    // write temp + rename so partial writes never leave a corrupt checkpoint
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 17 || &bytes[..9] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let payload_start = 17 + header_len;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Truncated("header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[17..payload_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    let actual = bytes.len() - payload_start;
    if expected != actual {
        return Err(CheckpointError::LengthMismatch { expected, actual });
    }

    let mut params = ParamSet::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(CheckpointError::Header(format!(
                "unsupported dtype {} for {}",
                entry.dtype, entry.name
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = payload_start + entry.offset;
        if start + n * 8 > bytes.len() {
            return Err(CheckpointError::Truncated(entry.name.clone()));
        }
        let data: Vec<f64> = bytes[start..start + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.insert(entry.name.clone(), t);
    }
    Ok((params, header.config))
}
