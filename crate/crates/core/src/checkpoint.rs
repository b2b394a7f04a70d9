//! Checkpoint files: magic line, one JSON manifest line, then one tensor
//! block per parameter in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor};

pub const CHECKPOINT_MAGIC: &str = "EXCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_TENSOR_VALUES: usize = 1 << 28;

/// Hex SHA-256 of the canonical (key-sorted) JSON form of `value`.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Hex SHA-256 of raw bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the names, shapes and f32 values of the selected
/// parameters, in store order.
pub fn params_hash(store: &ParamStore<f32>, select: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in store.iter().filter(|(_, n, _)| select(n)) {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub stages: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<S: Serialize>(config: &S, stages: usize, params: ParamStore<f32>) -> Result<Self> {
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            stages,
            params: params
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        Ok(Self { manifest, params })
    }

    /// Parameters whose name starts with `prefix`, in stored order.
    pub fn subset(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (_, name, t) in self.params.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            out.add(name, t.clone());
        }
        out
    }

    /// Deserializes the stored model configuration.
    pub fn config<S: for<'de> Deserialize<'de>>(&self) -> Result<S> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut w, &self.manifest)?;
        writeln!(w)?;
        for (_, _, t) in self.params.iter() {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", format!("expected {CHECKPOINT_MAGIC:?}")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(line.trim_end_matches('\n')).map_err(|e| Error::format("manifest", e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("expected {CHECKPOINT_VERSION}, found {}", manifest.version),
            ));
        }
        if config_hash(&manifest.config)? != manifest.config_hash {
            return Err(Error::format("config_hash", "does not match the stored config"));
        }
        let mut params = ParamStore::new();
        for entry in &manifest.params {
            let t = read_tensor::<f32, _>(&mut r, MAX_TENSOR_VALUES)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::format(
                    "params",
                    format!("{} has shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape),
                ));
            }
            params.add(entry.name.clone(), t);
        }
        let mut rest = [0u8; 1];
        if std::io::Read::read(&mut r, &mut rest)? != 0 {
            return Err(Error::format("params", "trailing bytes after the last tensor"));
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
