//! FLKC checkpoint files.
//!
//! Layout: `b"FLKC"`, `u32` version, `u32` header length, UTF-8 JSON header
//! (model config plus a leaf manifest), then every leaf as f64 little-endian
//! values at the manifest's byte offset relative to the payload start.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FLKC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafEntry {
    pub id: String,
    pub kind: LeafKind,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    leaves: Vec<LeafEntry>,
}

fn fmt_err(message: impl Into<String>) -> Error {
    Error::Format {
        context: "checkpoint".into(),
        message: message.into(),
    }
}

pub fn to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let mut leaves = Vec::new();
    let mut payload = Vec::new();
    let tensors = model
        .store
        .params()
        .iter()
        .map(|p| (p.id.as_str(), LeafKind::Param, &p.value))
        .chain(model.store.buffers().iter().map(|(id, t)| (id.as_str(), LeafKind::Buffer, t)));
    for (id, kind, t) in tensors {
        leaves.push(LeafEntry {
            id: id.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        leaves,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fmt_err("missing FLKC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let hdr = bytes.get(12..12 + hlen).ok_or_else(|| fmt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(hdr)?;
    let payload = &bytes[12 + hlen..];
    let mut store = ParamStore::new();
    for leaf in &header.leaves {
        let n: usize = leaf.shape.iter().product();
        let start = leaf.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| fmt_err(format!("payload of `{}` is truncated", leaf.id)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(leaf.shape.clone(), data)?;
        match leaf.kind {
            LeafKind::Param => store.add_param(leaf.id.clone(), t)?,
            LeafKind::Buffer => store.add_buffer(leaf.id.clone(), t)?,
        }
    }
    let reference = ModelParams::build(header.config.clone(), 0)?;
    if !reference.store.same_manifest(&store) {
        return Err(fmt_err("leaf manifest does not match the stored model config"));
    }
    Ok(ModelParams {
        config: header.config,
        store,
    })
}

pub fn save(path: &Path, model: &ModelParams) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            context: path.display().to_string(),
            message,
        },
        other => other,
    })
}
