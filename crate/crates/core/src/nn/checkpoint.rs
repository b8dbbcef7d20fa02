//! `CKPT1`: named f32 tensors plus a JSON config block.
//!
//! Layout (little-endian): magic `CKPT1`, u32 version, u32 config length,
//! config bytes, u32 tensor count, then per tensor: u32 name length, name,
//! u32 rank, u32 dims…, f32 data. Tensors are written in store order, so the
//! bytes depend only on the parameters and the config.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 5] = b"CKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize)]
struct TaggedOut<'a, C> {
    kind: &'a str,
    config: &'a C,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaggedIn<C> {
    kind: String,
    config: C,
}

impl Checkpoint {
    /// Checkpoint whose config block is `{"kind": .., "config": ..}`.
    pub fn tagged<T: Scalar, C: Serialize>(kind: &str, config: &C, store: &ParamStore<T>) -> Self {
        let json = serde_json::to_string(&TaggedOut { kind, config }).expect("config serializes");
        Self::from_store(json, store)
    }

    /// Parses a tagged config block, requiring the given kind.
    pub fn config_of<C: DeserializeOwned>(&self, kind: &str) -> Result<C> {
        let t: TaggedIn<C> =
            serde_json::from_str(&self.config).map_err(|e| Error::format("CKPT1", format!("config block: {e}")))?;
        if t.kind != kind {
            return Err(Error::format("CKPT1", format!("expected a {kind} checkpoint, found {}", t.kind)));
        }
        Ok(t.config)
    }

    pub fn from_store<T: Scalar>(config: String, store: &ParamStore<T>) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).cast()))
            .collect();
        Self { config, tensors }
    }

    /// Loads the tensors into `store`, which must have the same layout.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load(
            self.tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        )
    }
}

pub fn write_checkpoint<W: Write>(out: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let u32le = |out: &mut W, v: usize| out.write_all(&(v as u32).to_le_bytes());
    out.write_all(MAGIC)?;
    u32le(out, VERSION as usize)?;
    u32le(out, ckpt.config.len())?;
    out.write_all(ckpt.config.as_bytes())?;
    u32le(out, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        u32le(out, name.len())?;
        out.write_all(name.as_bytes())?;
        u32le(out, 2)?;
        u32le(out, t.rows)?;
        u32le(out, t.cols)?;
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = ByteCursor::new(&buf, "CKPT1");
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("CKPT1", "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("CKPT1", format!("unsupported version {version}")));
    }
    let clen = cur.u32()? as usize;
    let config = String::from_utf8(cur.take(clen)?.to_vec())
        .map_err(|_| Error::format("CKPT1", "config block is not UTF-8"))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| Error::format("CKPT1", "tensor name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [] => (1, 1),
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(Error::format(
                    "CKPT1",
                    format!("{name}: rank {rank} tensors are not supported"),
                ))
            }
        };
        let data = (0..rows * cols).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor { rows, cols, data }));
    }
    if !cur.is_empty() {
        return Err(Error::format("CKPT1", "trailing bytes"));
    }
    Ok(Checkpoint { config, tensors })
}
