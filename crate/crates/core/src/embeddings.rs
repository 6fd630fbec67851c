//! External clip embeddings for the fusion block: providers and alignment
//! to the model's frame rate.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_file;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_DIM: usize = 768;
pub const ALIGNED_FRAMES: usize = 250;
/// Frame count produced by the stub provider, close to what a 10 s clip
/// yields from a patch-based audio encoder.
pub const STUB_FRAMES: usize = 496;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    #[default]
    AveragePool,
    NearestInterpolation,
}

/// Resample an `[N, D]` embedding to `[frames, D]`.
///
/// Average pooling averages input rows `[⌊iN/frames⌋, ⌊(i+1)N/frames⌋)`; it
/// needs `N ≥ frames` and falls back to nearest otherwise. Nearest copies
/// row `round(i·(N−1)/(frames−1))`.
pub fn align(e: &Tensor, method: AlignMethod, frames: usize) -> Result<Tensor> {
    if e.rank() != 2 || e.dim(0) == 0 || frames == 0 {
        return Err(Error::Input(format!("cannot align embedding of shape {:?}", e.shape())));
    }
    let (n, d) = (e.dim(0), e.dim(1));
    let row = |i: usize| &e.data()[i * d..(i + 1) * d];
    let mut out = Vec::with_capacity(frames * d);
    if method == AlignMethod::AveragePool && n >= frames {
        for i in 0..frames {
            let (lo, hi) = (i * n / frames, (i + 1) * n / frames);
            let mut acc = vec![0.0; d];
            for j in lo..hi {
                acc.iter_mut().zip(row(j)).for_each(|(a, v)| *a += v);
            }
            out.extend(acc.iter().map(|a| a / (hi - lo) as f64));
        }
    } else {
        for i in 0..frames {
            let j = if frames == 1 {
                0
            } else {
                ((i * (n - 1)) as f64 / (frames - 1) as f64).round() as usize
            };
            out.extend_from_slice(row(j));
        }
    }
    Tensor::new(vec![frames, d], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// `<dir>/<clip_id>.emb` files.
    File { dir: PathBuf },
    /// Deterministic pseudo-random matrices keyed by clip id and seed.
    Stub { seed: u64 },
}

pub fn embedding_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.emb"))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `[STUB_FRAMES, dim]` uniform in [−1, 1], a pure function of `(clip_id, seed)`.
pub fn stub_embedding(clip_id: &str, seed: u64, dim: usize) -> Tensor {
    let key = fnv1a(clip_id) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Tensor::from_fn(&[STUB_FRAMES, dim], |_| rng.gen_range(-1.0..=1.0))
}

pub fn write_embedding(path: &Path, e: &Tensor) -> Result<()> {
    matrix_file::write(MAGIC, path, e)
}

/// Read an EMB1 file and check its width against `dim`.
pub fn read_embedding(path: &Path, dim: usize) -> Result<Tensor> {
    let e = matrix_file::read(MAGIC, path)?;
    if e.dim(1) != dim {
        return Err(Error::Format {
            context: path.display().to_string(),
            message: format!("embedding dimension {} (expected {dim})", e.dim(1)),
        });
    }
    if !e.is_finite() {
        return Err(Error::Format {
            context: path.display().to_string(),
            message: "non-finite embedding values".into(),
        });
    }
    Ok(e)
}

/// Raw `[N, dim]` embedding for `clip_id`.
pub fn provide(clip_id: &str, source: &EmbeddingSource, dim: usize) -> Result<Tensor> {
    match source {
        EmbeddingSource::Stub { seed } => Ok(stub_embedding(clip_id, *seed, dim)),
        EmbeddingSource::File { dir } => {
            let path = embedding_path(dir, clip_id);
            read_embedding(&path, dim).map_err(|e| match e {
                Error::Io { source, .. } => Error::Io {
                    path: PathBuf::from(format!("{} (clip {clip_id})", path.display())),
                    source,
                },
                other => other,
            })
        }
    }
}
