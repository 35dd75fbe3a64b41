//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STARCKPT"            8 bytes
//! format version        u32
//! header length         u64
//! header                JSON: model description, fine-tune config, seed,
//!                       free-form metadata, parameter names and shapes
//! parameter data        f64 values of every parameter, in header order
//! SHA-256               32 bytes over everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FinetuneConfig, Mode, StarModel};
use crate::autograd::ParamStore;
use crate::error::{Result, StarError};
use crate::tensor::Mat;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STARCKPT";
const DIGEST_LEN: usize = 32;

/// A fine-tuned model together with its parameter values.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: StarModel,
    pub store: ParamStore,
    pub seed: u64,
    pub finetune: FinetuneConfig,
    /// Caller-supplied provenance, stored verbatim.
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    mode: Mode,
    seed: u64,
    finetune: FinetuneConfig,
    model: StarModel,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        mode: ckpt.model.mode,
        seed: ckpt.seed,
        finetune: ckpt.finetune.clone(),
        model: ckpt.model.clone(),
        meta: ckpt.meta.clone(),
        params: ckpt
            .store
            .iter()
            .map(|(_, n, m)| ParamEntry {
                name: n.to_string(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 8 * ckpt.store.num_scalars() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, m) in ckpt.store.iter() {
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| StarError::io(path, e))
}

/// Read a checkpoint; with `expected` set, a different mode is an error.
pub fn load_checkpoint(path: &Path, expected: Option<Mode>) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| StarError::io(path, e))?;
    if buf.len() < MAGIC.len() + 4 + 8 + DIGEST_LEN || &buf[..8] != MAGIC {
        return Err(StarError::Corrupt(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(StarError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(StarError::Checksum(path.to_path_buf()));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| StarError::Corrupt("header length runs past the file".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    if let Some(exp) = expected {
        if exp != header.mode {
            return Err(StarError::ModeMismatch {
                found: header.mode.to_string(),
                expected: exp.to_string(),
            });
        }
    }
    let mut data = body[header_end..].chunks_exact(8);
    let mut store = ParamStore::new();
    for p in &header.params {
        let n = p.rows * p.cols;
        let values: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.len() != n {
            return Err(StarError::Corrupt(format!(
                "parameter '{}' is truncated",
                p.name
            )));
        }
        store.add(p.name.clone(), Mat::from_vec(p.rows, p.cols, values));
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(StarError::Corrupt(
            "trailing bytes after parameter data".into(),
        ));
    }
    Ok(Checkpoint {
        model: header.model,
        store,
        seed: header.seed,
        finetune: header.finetune,
        meta: header.meta,
    })
}
