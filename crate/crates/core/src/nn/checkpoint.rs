//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"TXLCKPT\0"
//! version u32
//! mlen    u32, followed by `mlen` bytes of JSON manifest
//! count   u32 tensors, each:
//!   name_len u32, name bytes, group_len u32, group bytes, trainable u8,
//!   ndim u32, dims u64 × ndim, values f64 × prod(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const MAGIC: &[u8; 8] = b"TXLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Model kind, e.g. `"classifier"`, `"metric"`, `"captioner"`.
    pub kind: String,
    pub encoder_kind: Option<String>,
    pub dims: BTreeMap<String, usize>,
    pub layer_spec: Vec<usize>,
    pub seed: u64,
    /// Free-form extra fields (serialized model configuration, epoch, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    manifest: &CheckpointManifest,
    store: &ParamStore<T>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let m = serde_json::to_vec(manifest).map_err(std::io::Error::other)?;
    w.write_all(&(m.len() as u32).to_le_bytes())?;
    w.write_all(&m)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        write_str(&mut w, &p.name)?;
        write_str(&mut w, &p.group)?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(CheckpointManifest, ParamStore<T>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = read_u32(&mut r)? as usize;
    let mut mbuf = vec![0u8; mlen];
    r.read_exact(&mut mbuf).map_err(|_| bad("truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&mbuf).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let group = read_str(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| bad("truncated tensor"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
            data.push(T::c(f64::from_le_bytes(b)));
        }
        params.push(Param {
            name,
            value: Tensor::new(shape, data),
            trainable: flag[0] != 0,
            group,
        });
    }
    for p in params {
        store.push_param(p);
    }
    Ok((manifest, store))
}

pub fn save<T: Scalar>(path: &Path, manifest: &CheckpointManifest, store: &ParamStore<T>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), manifest, store).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointManifest, ParamStore<T>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated string".into()))?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("non-utf8 name".into()))
}
