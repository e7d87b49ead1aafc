//! Binary checkpoints.
//!
//! Layout (little-endian): magic `3MCK`, `u32` version, 32-byte SHA-256
//! digest of the metadata, `u64` metadata length, metadata JSON (model
//! config and vocabularies), `u32` parameter count, then per parameter:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension, and the
//! values as `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{StyleVocabulary, Vocabulary};
use crate::error::{data_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"3MCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub styles: StyleVocabulary,
}

pub fn config_digest(meta_json: &[u8]) -> [u8; 32] {
    Sha256::digest(meta_json).into()
}

pub fn encode_checkpoint(meta: &CheckpointMeta, params: &ParamStore) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&meta_json));
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(data_err!("checkpoint truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(data_err!("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(data_err!("unsupported checkpoint version {version}"));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let meta_len = r.u64()? as usize;
    let meta_json = r.take(meta_len)?;
    if config_digest(meta_json) != digest {
        return Err(data_err!("checkpoint config digest mismatch"));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_json).map_err(|e| data_err!("checkpoint metadata: {e}"))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| data_err!("parameter name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data).map_err(|e| data_err!("parameter {name}: {e}"))?;
        params.add(name, ParamGroup::Other, value);
    }
    if r.pos != bytes.len() {
        return Err(data_err!("{} trailing bytes after checkpoint", bytes.len() - r.pos));
    }
    Ok((meta, params))
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary, styles: &StyleVocabulary) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        vocab: vocab.clone(),
        styles: styles.clone(),
    };
    fs::write(path, encode_checkpoint(&meta, &model.params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary, StyleVocabulary)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => data_err!("checkpoint {} not found", path.display()),
        _ => Error::io(path, e),
    })?;
    let (meta, params) = decode_checkpoint(&bytes).map_err(|e| data_err!("{}: {}", path.display(), e))?;
    let mut model = Model::new(meta.model, 0)?;
    model.load_params(&params)?;
    Ok((model, meta.vocab, meta.styles))
}
