//! Checkpoint container.
//!
//! Layout: 8-byte magic `CPCKPT\0\0`, little-endian `u64` header length, a
//! JSON header, then the concatenated little-endian parameter payload. The
//! header carries the format version, the model configuration, one entry per
//! tensor and the SHA-256 of the payload.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::toy::ToyBackbone;
use super::ModelConfig;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CPCKPT\0\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    dtype: String,
    seed: u64,
    lora_injected: bool,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: usize,
    len: usize,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

pub fn save_checkpoint(model: &ToyBackbone, path: impl AsRef<Path>) -> Result<()> {
    let dtype = model.dtype();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in model.params().iter() {
        let t = p.var.as_tensor().flatten_all()?;
        let offset = payload.len();
        match dtype {
            DType::F32 => t
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            _ => t
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.var.dims().to_vec(),
            trainable: p.trainable,
            offset,
            len: payload.len() - offset,
        });
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        dtype: dtype_name(dtype)?.into(),
        seed: model.seed(),
        lora_injected: model.lora_injected(),
        tensors,
        payload_sha256: hex_digest(&payload),
    };
    let header = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a checkpoint. When `expected` is given, its architecture and
/// adapter settings must match the file's.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<ToyBackbone> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::Format {
            offset: 8,
            message: format!("header length {header_len} exceeds file size"),
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Format {
        offset: 16 + e.column().saturating_sub(1),
        message: format!("bad checkpoint header: {e}"),
    })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 16,
            message: format!("unsupported checkpoint version {}", header.version),
        });
    }
    let payload = &bytes[header_end..];
    if hex_digest(payload) != header.payload_sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from expected {:?}",
                header.config, exp
            )));
        }
    }
    header.config.validate()?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => {
            return Err(Error::Format {
                offset: 16,
                message: format!("unknown dtype {other}"),
            })
        }
    };

    // Rebuild the architecture, then overwrite every tensor.
    let mut model = ToyBackbone::with_dtype(header.config.clone(), header.seed, dtype)?;
    if header.lora_injected {
        let lora = header.config.lora.clone();
        model = super::toy::inject_lora(model, &lora)?;
    }
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let Some(existing) = model.params().param(&entry.name) else {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint tensor {} does not exist in the configured model",
                entry.name
            )));
        };
        if existing.var.dims() != entry.shape.as_slice() {
            return Err(Error::ConfigMismatch(format!(
                "tensor {} has shape {:?}, configured model expects {:?}",
                entry.name,
                entry.shape,
                existing.var.dims()
            )));
        }
        let raw = payload
            .get(entry.offset..entry.offset + entry.len)
            .ok_or(Error::Format {
                offset: header_end + entry.offset,
                message: format!("tensor {} runs past end of payload", entry.name),
            })?;
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            }
            _ => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?
            }
        };
        params.insert(entry.name.clone(), t, entry.trainable)?;
    }
    if params.len() != model.params().len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} tensors, configured model has {}",
            params.len(),
            model.params().len()
        )));
    }
    ToyBackbone::from_parts(header.config, params, dtype, header.seed, header.lora_injected)
}
