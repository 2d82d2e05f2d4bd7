//! `IFTM` checkpoint files.
//!
//! Layout (little-endian): magic `"IFTM"`, version u16, then `n_layers`,
//! `d_model`, `n_heads`, `ff_dim`, `vocab_size`, `max_seq_len` as u32 and
//! `seed` as u64, then every weight as f32 in [`ParamLayout`] order.
//! Loaded checkpoints are frozen.
//!
//! [`ParamLayout`]: super::ParamLayout

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;

use super::{ModelConfig, ToyTransformer, Transformer};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFTM";
const CHECKPOINT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 6 * 4 + 8;

impl ToyTransformer {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.ff_dim,
            c.vocab_size,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        for w in self.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::decode("IFTM", "missing magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::decode("IFTM", format!("unsupported version {version}")));
        }
        let u32_at = |i: usize| {
            u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize
        };
        let mut seed = [0u8; 8];
        seed.copy_from_slice(&bytes[30..38]);
        let config = ModelConfig {
            n_layers: u32_at(6),
            d_model: u32_at(10),
            n_heads: u32_at(14),
            ff_dim: u32_at(18),
            vocab_size: u32_at(22),
            max_seq_len: u32_at(26),
            seed: u64::from_le_bytes(seed),
        };
        config
            .validate()
            .map_err(|e| Error::decode("IFTM", e.to_string()))?;
        let body = &bytes[HEADER_LEN..];
        if !body.len().is_multiple_of(4) {
            return Err(Error::decode("IFTM", "truncated weight block"));
        }
        let weights: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Transformer::from_parts(config, weights, true).map_err(|e| Error::decode("IFTM", e.to_string()))
    }

    /// 64-bit FNV-1a digest of the checkpoint encoding. Identifies the
    /// serving model in the task store.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(&self.to_checkpoint_bytes());
        h.finish()
    }
}

pub fn save_checkpoint(model: &ToyTransformer, path: &Path) -> Result<()> {
    write_atomic(path, &model.to_checkpoint_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTransformer> {
    ToyTransformer::from_checkpoint_bytes(&fs::read(path)?)
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
