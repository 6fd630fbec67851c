//! `magic, u32 rows, u32 cols, f32 LE row-major` matrix files shared by the
//! feature cache and the embedding store.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn encode(magic: &[u8; 4], m: &Tensor) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(Error::dim("input", format!("matrix file needs a rank-2 tensor, got {:?}", m.shape())));
    }
    let mut out = Vec::with_capacity(12 + 4 * m.numel());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(m.dim(0) as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim(1) as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode(magic: &[u8; 4], bytes: &[u8], context: &str) -> Result<Tensor> {
    let err = |message: String| Error::Format {
        context: context.to_string(),
        message,
    };
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(err(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if rows == 0 || cols == 0 {
        return Err(err(format!("empty matrix {rows}x{cols}")));
    }
    let payload = &bytes[12..];
    if payload.len() != 4 * rows * cols {
        return Err(err(format!(
            "payload holds {} bytes, header promises {rows}x{cols} f32",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

pub(crate) fn write(magic: &[u8; 4], path: &Path, m: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(magic, m)?).map_err(|e| Error::io(path, e))
}

pub(crate) fn read(magic: &[u8; 4], path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes, &path.display().to_string())
}
