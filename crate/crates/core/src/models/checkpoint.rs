//! Parameter checkpoints: a little-endian binary tensor file plus a JSON sidecar.
//!
//! Binary layout: magic `ADVTTA01`, `u32` tensor count, then per tensor a
//! `u32`-prefixed UTF-8 name, a role byte (1 weight, 0 buffer), a `u32` rank,
//! `u64` dims, and the `f64` values.

use super::{json_hash, Model, ParamStore};
use crate::error::{Error, Result};
use advtta_tensor::{Param, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"ADVTTA01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub state_hash: String,
}

impl CheckpointMeta {
    pub fn for_model(model: &impl Model, seed: u64, epoch: usize, val_loss: Option<f64>) -> Self {
        let config = model.config_json();
        CheckpointMeta {
            kind: model.kind().to_string(),
            config_hash: json_hash(&config),
            config,
            seed,
            epoch,
            val_loss,
            state_hash: model.state_hash(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let params: Vec<&Param> = store.iter().collect();
    out.extend((params.len() as u32).to_le_bytes());
    for p in params {
        out.extend((p.name.len() as u32).to_le_bytes());
        out.extend(p.name.as_bytes());
        out.push(u8::from(p.is_weight()));
        out.extend((p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(p.value.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(buf: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?.to_string();
        let weight = r.take(1)?[0] == 1;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let value = Tensor::new(&shape, data);
        if store.contains(&name) {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
        store.push(if weight { Param::weight(name, value) } else { Param::buffer(name, value) });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(store)
}

/// Writes `model` to `path` and its metadata next to it.
pub fn save_checkpoint(path: &Path, model: &impl Model, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model.store())).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Reads a checkpoint's tensors and metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let store = decode(&raw, path)?;
    let side = sidecar_path(path);
    let meta_raw = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_raw).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.state_hash != store.state_hash() {
        return Err(Error::format(path, "tensor data does not match the sidecar state hash"));
    }
    Ok((store, meta))
}

/// Loads a checkpoint into an already-built model of the same architecture.
pub fn restore_into(path: &Path, model: &mut impl Model) -> Result<CheckpointMeta> {
    let (store, meta) = load_checkpoint(path)?;
    if meta.kind != model.kind() {
        return Err(Error::format(path, format!("checkpoint holds a {}, expected a {}", meta.kind, model.kind())));
    }
    model.store_mut().load_from(&store)?;
    Ok(meta)
}
