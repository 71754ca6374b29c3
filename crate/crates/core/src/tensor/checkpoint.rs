//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CSEGCKPT"
//! offset 8   u64       manifest length L in bytes
//! offset 16  L bytes   UTF-8 JSON manifest
//! offset 16+L          value blocks, concatenated in manifest order
//! ```
//!
//! The manifest is
//! `{"format_version":1,"precision":"f32"|"f64","tensors":[{"name","shape","offset","len"}],"metadata":{..}}`
//! where `offset` and `len` count elements (not bytes) from the start of the
//! value section. Reading a checkpoint at a different precision converts values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Precision, Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSEGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub entries: Vec<CheckpointEntry<T>>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    precision: Precision,
    tensors: Vec<TensorRecord>,
    metadata: serde_json::Value,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Parse {
        path: "<checkpoint>".into(),
        message: message.into(),
    }
}

pub fn write_checkpoint<T: Real>(mut w: impl Write, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut offset = 0;
    let tensors = ckpt
        .entries
        .iter()
        .map(|e| {
            let rec = TensorRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                offset,
                len: e.tensor.numel(),
            };
            offset += e.tensor.numel();
            rec
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        tensors,
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| Error::io("writing checkpoint", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for e in &ckpt.entries {
        w.write_all(&T::to_le_bytes_vec(e.tensor.data())).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real>(mut r: impl Read) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let values = &bytes[16 + len..];
    let width = match manifest.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for rec in manifest.tensors {
        let block = values
            .get(rec.offset * width..(rec.offset + rec.len) * width)
            .ok_or_else(|| bad(format!("value block for {} out of range", rec.name)))?;
        let data: Vec<T> = match manifest.precision {
            Precision::F32 => f32::from_le_slice(block).into_iter().map(|v| T::lit(v as f64)).collect(),
            Precision::F64 => f64::from_le_slice(block).into_iter().map(T::lit).collect(),
        };
        entries.push(CheckpointEntry {
            name: rec.name,
            tensor: Tensor::new(rec.shape, data)?,
        });
    }
    Ok(Checkpoint {
        entries,
        metadata: manifest.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            entries: vec![
                CheckpointEntry {
                    name: "a".into(),
                    tensor: Tensor::new(vec![2, 2], vec![1.5, -0.25, f32::MIN_POSITIVE, 3e7]).unwrap(),
                },
                CheckpointEntry {
                    name: "b".into(),
                    tensor: Tensor::new(vec![1], vec![42.0]).unwrap(),
                },
            ],
            metadata: serde_json::json!({"model": "unet"}),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let back: Checkpoint<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..8], b"CSEGCKPT");
        let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&buf[16..16 + len]).unwrap();
        assert_eq!(manifest["precision"], "f32");
        assert_eq!(manifest["tensors"][1]["offset"], 4);
        assert_eq!(buf.len(), 16 + len + 5 * 4);
        assert_eq!(&buf[16 + len..16 + len + 4], &1.5f32.to_le_bytes());
    }

    #[test]
    fn widening_read() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        let wide: Checkpoint<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(wide.entries[0].tensor.data()[1], -0.25);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint::<f32>(&b"not a checkpoint"[..]).is_err());
    }
}
