//! `CKPT` checkpoint files.
//!
//! Layout, little-endian: magic `CKPT`, `u32` version, `u32` header length,
//! JSON header, then per tensor `[u16 name_len, name, u8 rank, u32 dims...,
//! f32 data]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{HeadConfig, Model, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Training context stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    /// Validation metrics at save time, including the ranking metric.
    pub metrics: BTreeMap<String, f64>,
    pub run_config: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: HeadConfig,
    seed: u64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    run_config: Value,
    n_tensors: usize,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if let Some((k, v)) = meta.metrics.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("checkpoint metric `{k}` = {v}"),
        });
    }
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        metrics: meta.metrics.clone(),
        run_config: meta.run_config.clone(),
        n_tensors: model.params.len(),
    })?;
    let mut buf = Vec::with_capacity(12 + header.len() + 4 * model.params.scalar_count());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for (name, t) in model.params.entries() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let buf = encode_checkpoint(model, meta)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4).ok() != Some(CKPT_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad magic, expected CKPT"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let mut entries = Vec::with_capacity(header.n_tensors);
    for _ in 0..header.n_tensors {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = Model::from_params(header.model, Params::new(entries))?;
    let meta = CheckpointMeta {
        seed: header.seed,
        epoch: header.epoch,
        metrics: header.metrics,
        run_config: header.run_config,
    };
    Ok((model, meta))
}

/// Rejects `found` unless it equals `expected`, naming the first differing
/// field as a dotted path.
pub fn ensure_compatible(expected: &HeadConfig, found: &HeadConfig) -> Result<()> {
    fn diff(path: &str, a: &Value, b: &Value) -> Option<(String, String, String)> {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                keys.into_iter().find_map(|k| {
                    let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    diff(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
                })
            }
            _ if a == b => None,
            _ => Some((path.to_owned(), a.to_string(), b.to_string())),
        }
    }
    let a = serde_json::to_value(expected)?;
    let b = serde_json::to_value(found)?;
    match diff("", &a, &b) {
        None => Ok(()),
        Some((field, expected, found)) => Err(Error::Incompatible { field, expected, found }),
    }
}
