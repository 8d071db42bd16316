//! Binary checkpoint layout (all integers u64 little-endian unless noted):
//!
//! ```text
//! "MVSE" | version: u32 | config JSON (len-prefixed)
//! | osm_mean | osm_std | gs_mean | gs_std        (each len-prefixed f64s)
//! | tensor count | { name | rank | dims.. | f64 data }*
//! | best_epoch | best_val_loss: f64 | seed
//! | SHA-256 of everything above (32 bytes)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::encoders::{ModelConfig, NormStats, SpatialEmbeddingModel};

use super::{write_atomic, DataError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVSE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMetadata {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
}

/// A model plus how it was obtained; enough to embed new coordinates.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SpatialEmbeddingModel,
    pub metadata: TrainingMetadata,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(ckpt.model.config()).expect("config serialises");
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(&config);

    let stats = ckpt.model.stats();
    for v in [&stats.osm_mean, &stats.osm_std, &stats.gs_mean, &stats.gs_std] {
        put_f64s(&mut out, v);
    }

    let params = ckpt.model.params();
    put_u64(&mut out, params.len() as u64);
    for (name, t) in params.iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    let m = &ckpt.metadata;
    put_u64(&mut out, m.best_epoch as u64);
    out.extend_from_slice(&m.best_val_loss.to_le_bytes());
    put_u64(&mut out, m.seed);

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(DataError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(DataError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }

    let config_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| DataError::Corrupt(format!("config: {e}")))?;

    let stats = NormStats {
        osm_mean: r.f64s()?,
        osm_std: r.f64s()?,
        gs_mean: r.f64s()?,
        gs_std: r.f64s()?,
    };

    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DataError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        if params.id(&name).is_some() {
            return Err(DataError::Corrupt(format!("duplicate tensor {name}")));
        }
        let rank = r.len()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::Corrupt(format!("tensor {name}: shape overflow")))?;
        let data = r.f64_array(n)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| DataError::Corrupt(format!("tensor {name}: {e}")))?;
        params.add(name, tensor);
    }

    let best_epoch = r.u64()? as usize;
    let best_val_loss = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let seed = r.u64()?;
    if r.pos != body.len() {
        return Err(DataError::Corrupt("trailing bytes before checksum".into()));
    }
    let model = SpatialEmbeddingModel::from_parts(config, params, stats)?;
    Ok(Checkpoint {
        model,
        metadata: TrainingMetadata {
            best_epoch,
            best_val_loss,
            seed,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), DataError> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length field, bounded by the bytes that remain.
    fn len(&mut self) -> Result<usize, DataError> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| DataError::Corrupt(format!("length {v} exceeds the file")))
    }

    fn f64_array(&mut self, n: usize) -> Result<Vec<f64>, DataError> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| DataError::Corrupt("array length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f64s(&mut self) -> Result<Vec<f64>, DataError> {
        let n = self.len()?;
        self.f64_array(n)
    }
}
