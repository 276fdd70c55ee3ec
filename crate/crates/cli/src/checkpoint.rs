//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FITCKPT\0" | version u32 | body length u64 | body | sha256(everything before)
//! body = header length u64 | JSON header | f64 blobs
//! ```
//!
//! The blobs hold every parameter in header order, then the Adam first and
//! second moments in the same order.

use std::fs;
use std::path::Path;

use fit_core::nn::ParamEntry;
use fit_core::rng::{RngState, RngStream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, CheckpointError, Result};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"FITCKPT\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub run: RunConfig,
    pub step: u64,
    pub adam_t: u64,
    pub data_rng: RngState,
    pub params: Vec<TensorMeta>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Trainer) -> Vec<u8> {
    let entries = t.model.params.entries();
    let header = Header {
        run: t.config.clone(),
        step: t.step,
        adam_t: t.adam.t,
        data_rng: t.data_rng.state(),
        params: entries
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    for e in entries {
        push_f64s(&mut body, &e.value);
    }
    for m in t.adam.m.iter().chain(&t.adam.v) {
        push_f64s(&mut body, m);
    }
    let mut out = Vec::with_capacity(PREAMBLE + body.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| malformed("blob extends past the body"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| malformed("blob too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Validates framing and checksum, then rebuilds the training state.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            found: bytes.len(),
            expected: PREAMBLE,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = usize::try_from(body_len)
        .ok()
        .and_then(|b| b.checked_add(PREAMBLE + DIGEST))
        .ok_or_else(|| malformed("body length overflows"))?;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            found: bytes.len(),
            expected,
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - expected)).into());
    }
    let (framed, digest) = bytes.split_at(expected - DIGEST);
    if Sha256::digest(framed).as_slice() != digest {
        return Err(CheckpointError::Checksum.into());
    }
    let mut r = Reader {
        bytes: &framed[PREAMBLE..],
        at: 0,
    };
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| malformed("header too large"))?;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| malformed(e.to_string()))?;
    let mut trainer = Trainer::new(header.run.clone())?;
    let entries: Vec<ParamEntry> = header
        .params
        .iter()
        .map(|meta| {
            let value = r.f64s(meta.shape.iter().product())?;
            Ok(ParamEntry {
                name: meta.name.clone(),
                shape: meta.shape.clone(),
                value,
                trainable: meta.trainable,
            })
        })
        .collect::<std::result::Result<_, CheckpointError>>()?;
    trainer
        .model
        .params
        .load_values(&entries)
        .map_err(|e| malformed(e.to_string()))?;
    let ids: Vec<_> = trainer.model.params.ids().collect();
    for (id, meta) in ids.into_iter().zip(&header.params) {
        trainer.model.params.get_mut(id).trainable = meta.trainable;
    }
    let sizes: Vec<usize> = entries.iter().map(|e| e.value.len()).collect();
    let m = sizes.iter().map(|&n| r.f64s(n)).collect::<std::result::Result<_, _>>()?;
    let v = sizes.iter().map(|&n| r.f64s(n)).collect::<std::result::Result<_, _>>()?;
    if r.at != r.bytes.len() {
        return Err(malformed("unused bytes after the optimizer state").into());
    }
    trainer.adam.t = header.adam_t;
    trainer.adam.m = m;
    trainer.adam.v = v;
    trainer.step = header.step;
    trainer.data_rng = RngStream::from_state(header.data_rng);
    Ok(trainer)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(io_err(format!("writing {}", path.display())))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode(&bytes)
}
