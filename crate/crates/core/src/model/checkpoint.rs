//! Checkpoint files: one archive holding every weight and batch-norm
//! buffer keyed by hierarchical name, plus the model configuration.
//!
//! Layout: `b"FGLC"`, u32 format version, u64 JSON header length, the JSON
//! header (config plus a tensor index), then all tensor payloads as
//! little-endian f64 in index order.

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FGLC";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
    len: u64,
}

fn collect_state(model: &mut Model) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params("model", &mut |name, p| {
        out.push((name.to_string(), p.value.shape().to_vec(), p.value.data().to_vec()));
    });
    model.visit_buffers("model", &mut |name, t| {
        out.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    out
}

pub fn save_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let state = collect_state(model);
    let mut tensors = Vec::with_capacity(state.len());
    let mut offset = 0u64;
    for (name, shape, data) in &state {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header {
        format: "forgeloc-checkpoint".into(),
        version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    for (_, _, data) in &state {
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io_err)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io_err)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    let mut payload = vec![0.0f64; total as usize];
    let mut raw = vec![0u8; total as usize * 8];
    r.read_exact(&mut raw).map_err(io_err)?;
    for (i, chunk) in raw.chunks_exact(8).enumerate() {
        payload[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }

    let mut by_name: BTreeMap<String, &TensorEntry> = BTreeMap::new();
    for entry in &header.tensors {
        if by_name.insert(entry.name.clone(), entry).is_some() {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor '{}' in checkpoint",
                entry.name
            )));
        }
    }

    let mut model = Model::new(header.config.clone(), 0)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    {
        let mut fill = |name: &str, shape: &[usize], dst: &mut Tensor| {
            match by_name.get(name) {
                None => missing.push(name.to_string()),
                Some(entry) => {
                    used.insert(entry.name.clone());
                    if entry.shape != shape {
                        mismatched.push(format!(
                            "{name}: checkpoint {:?} vs model {:?}",
                            entry.shape, shape
                        ));
                    } else {
                        let start = entry.offset as usize;
                        let data = payload[start..start + entry.len as usize].to_vec();
                        *dst = Tensor::from_vec(shape, data).expect("index entry length");
                    }
                }
            }
        };
        model.visit_params("model", &mut |name, p| {
            let shape = p.value.shape().to_vec();
            fill(name, &shape, &mut p.value);
        });
        model.visit_buffers("model", &mut |name, t| {
            let shape = t.shape().to_vec();
            fill(name, &shape, t);
        });
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "tensor shape mismatches: {}",
            mismatched.join("; ")
        )));
    }
    let extra: Vec<String> = by_name
        .keys()
        .filter(|k| !used.contains(*k))
        .cloned()
        .collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}

/// Stable identifier of a model configuration (FNV-1a over its JSON form).
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let mut hash = 0xcbf29ce484222325u64;
    for b in json {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}
