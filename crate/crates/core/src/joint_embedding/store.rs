//! Embedding matrices on disk: a binary row-major `f64` matrix next to a
//! text file holding one id per line (`<path>.ids`).
//!
//! ```text
//! magic  b"TXLEMB\0\0"
//! rows   u64
//! cols   u64
//! values f64 × rows·cols (little endian)
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"TXLEMB\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Named rows of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub modality: Modality,
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(modality: Modality, ids: Vec<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids × {dim} needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("embedding contains non-finite values".into()));
        }
        Ok(EmbeddingStore { modality, ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn ids_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids");
        PathBuf::from(s)
    }

    pub fn write_matrix<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    /// Reads a matrix; ids are filled with row numbers.
    pub fn read_matrix<R: Read>(mut r: R, modality: Modality) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("embedding matrix: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != EMBEDDING_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        let rows = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        let cols = u64::from_le_bytes(b) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
            data.push(f64::from_le_bytes(b));
        }
        Self::new(modality, (0..rows).map(|i| i.to_string()).collect(), cols, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_matrix(BufWriter::new(f)).map_err(|e| Error::io(path, e))?;
        let ids = Self::ids_path(path);
        let mut text = self.ids.join("\n");
        text.push('\n');
        std::fs::write(&ids, text).map_err(|e| Error::io(&ids, e))
    }

    pub fn load(path: &Path, modality: Modality) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = Self::read_matrix(BufReader::new(f), modality)?;
        let ids_path = Self::ids_path(path);
        let f = std::fs::File::open(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(&ids_path, e))?;
        if ids.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                store.len()
            )));
        }
        store.ids = ids;
        Ok(store)
    }
}
