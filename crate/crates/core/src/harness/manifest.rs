//! Run manifests tying every written number to one configuration, code
//! version and dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    /// Dataset name → SHA-256.
    pub datasets: BTreeMap<String, String>,
    /// Flattened metric name → value.
    pub metrics: BTreeMap<String, f64>,
    /// Output files (tables, stores, reports) relative to the run directory.
    pub outputs: Vec<String>,
    pub checkpoints: Vec<String>,
    /// How training ended, for training runs.
    #[serde(default)]
    pub stop_reason: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: impl Into<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.to_string(),
            ..Default::default()
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Writes `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over ids, splits, descriptions and decoded pixels.
pub fn corpus_checksum(corpus: &Corpus) -> Result<String> {
    let mut h = Sha256::new();
    for (i, im) in corpus.images().iter().enumerate() {
        h.update(im.id.as_bytes());
        h.update([0]);
        h.update(im.split.as_str().as_bytes());
        let rgb = im.load_rgb()?;
        h.update(rgb.width().to_le_bytes());
        h.update(rgb.height().to_le_bytes());
        h.update(rgb.as_raw());
        for d in corpus.descriptions_at(i) {
            h.update(d.canonical().as_bytes());
            h.update([0]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `contents` to `dir/name` and records it as an output.
pub fn write_output(manifest: &mut RunManifest, dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    manifest.outputs.push(name.to_string());
    Ok(path)
}
