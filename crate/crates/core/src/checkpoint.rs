//! Versioned binary checkpoints.
//!
//! Layout: magic, version, a JSON metadata blob (stack config, training
//! config, seed), then a manifest-driven sequence of named f64 arrays in
//! little-endian byte order. Same weights in, same bytes out.

use crate::rng::Rng;
use crate::stack::{ControlStack, StackConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

type T64 = Tensor<f64>;

pub const MAGIC: [u8; 4] = *b"NCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("metadata: {0}")]
    Meta(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter order mismatch at {found}, expected {expected}")]
    NameMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stack: StackConfig,
    /// Opaque training configuration for provenance.
    pub train: serde_json::Value,
    pub seed: u64,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

pub fn serialize(stack: &ControlStack, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut buf, meta_json.len() as u64);
    buf.extend_from_slice(&meta_json);

    let mut entries: Vec<(String, T64)> = Vec::new();
    stack.visit_params(&mut |name, t| entries.push((name.to_string(), t.clone())));
    put_u64(&mut buf, entries.len() as u64);
    for (name, t) in entries {
        put_str(&mut buf, &name);
        put_u64(&mut buf, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| CheckpointError::Meta(e.to_string()))
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<(ControlStack, CheckpointMeta), CheckpointError> {
    let mut r = Reader {
        data: bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;

    // Architecture comes from the metadata; weights overwrite the init.
    let mut stack = ControlStack::init(meta.stack, &mut Rng::seed_from(0));
    let n_params = r.u64()? as usize;
    let mut loaded: Vec<(String, T64)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = T64::from_vec(&shape, data).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        loaded.push((name, t));
    }

    let mut idx = 0;
    let mut failure: Option<CheckpointError> = None;
    stack.visit_params_mut(&mut |name, param| {
        if failure.is_some() {
            return;
        }
        let Some((stored_name, stored)) = loaded.get(idx) else {
            failure = Some(CheckpointError::Truncated);
            return;
        };
        if stored_name != name {
            failure = Some(CheckpointError::NameMismatch {
                expected: name.to_string(),
                found: stored_name.clone(),
            });
            return;
        }
        if stored.shape() != param.shape() {
            failure = Some(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: param.shape().to_vec(),
                found: stored.shape().to_vec(),
            });
            return;
        }
        *param = stored.clone();
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((stack, meta))
}

pub fn write_file(
    path: &std::path::Path,
    stack: &ControlStack,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let bytes = serialize(stack, meta);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<(ControlStack, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path)?;
    deserialize(&bytes)
}
