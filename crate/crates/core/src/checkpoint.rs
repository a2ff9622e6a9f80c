//! Model checkpoints: `"VPCK"`, `u16` version, `u32` header length, a JSON
//! header (model config, stage, parameter table), the `f32` parameter payload
//! in table order, and the payload's CRC-32.

use std::path::Path;

use dualpaint_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, ParamStore};

pub const MAGIC: &[u8; 4] = b"VPCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stage: u8,
    params: Vec<ParamEntry>,
}

/// Serializes a model after training stage `stage`.
pub fn to_bytes(model: &Model, store: &ParamStore<f32>, stage: u8) -> Result<Vec<u8>> {
    let header = Header {
        config: model.cfg.clone(),
        stage,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let payload: Vec<u8> = store
        .iter()
        .flat_map(|(_, p)| p.value.data().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<_>>())
        .collect();
    let mut out = Vec::with_capacity(14 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Rebuilds the model from its stored config and loads every parameter.
/// Returns the model, its parameters and the stage it was saved after.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, ParamStore<f32>, u8)> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 14 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[10..];
    if body.len() < hlen + 4 {
        return Err(bad("truncated"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
    let payload = &body[hlen..body.len() - 4];
    let crc = u32::from_le_bytes(body[body.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != crc {
        return Err(bad("CRC mismatch"));
    }
    let (model, mut store) = Model::new::<f32>(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if store.len() != header.params.len() {
        return Err(bad("parameter table does not match the config"));
    }
    let mut off = 0;
    for (entry, id) in header.params.iter().zip(0..) {
        let id = crate::params::ParamId(id);
        let p = store.get(id);
        if p.name != entry.name || p.group != entry.group || p.value.shape() != entry.shape.as_slice() {
            return Err(bad(&format!("parameter {} does not match the config", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let end = off + 4 * n;
        if end > payload.len() {
            return Err(bad("payload too short"));
        }
        let data = payload[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *store.value_mut(id) = Tensor::from_vec(data, &entry.shape)?;
        off = end;
    }
    if off != payload.len() {
        return Err(bad("payload too long"));
    }
    Ok((model, store, header.stage))
}

pub fn save(path: &Path, model: &Model, store: &ParamStore<f32>, stage: u8) -> Result<()> {
    std::fs::write(path, to_bytes(model, store, stage)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, ParamStore<f32>, u8)> {
    if !path.exists() {
        return Err(Error::Missing(format!("checkpoint {}", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
