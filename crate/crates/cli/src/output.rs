use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use exchanger::checkpoint::content_hash;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of the bytes framed as `blob <len>\0<bytes>`, as git hashes
/// objects.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut framed = format!("blob {}\0", bytes.len()).into_bytes();
    framed.extend_from_slice(bytes);
    content_hash(&framed)
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    Ok(blob_hash(&fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Hash of the input dataset, or of the generated one for `gen-data`.
    pub dataset_hash: Option<String>,
    /// Input file to blob hash (datasets, checkpoints).
    pub inputs: BTreeMap<String, String>,
    /// File name to blob hash for every artifact in the directory.
    pub artifacts: BTreeMap<String, String>,
    pub version: String,
}

/// Output directory that becomes visible only when committed: files are
/// written to a sibling staging directory that is renamed into place.
pub struct Staged {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
    artifacts: BTreeMap<String, String>,
}

impl Staged {
    pub fn new(target: &Path, force: bool) -> Result<Self, CliError> {
        if target.exists() && !force {
            return Err(CliError::Config(format!("{} exists; pass --force to replace it", target.display())));
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Config(format!("invalid output directory {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(Self {
            target: target.to_path_buf(),
            staging,
            force,
            artifacts: BTreeMap::new(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    /// Records a file already written under [`Staged::path`].
    pub fn register(&mut self, file: &str) -> Result<String, CliError> {
        let hash = file_hash(&self.path(file))?;
        self.artifacts.insert(file.to_string(), hash.clone());
        Ok(hash)
    }

    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<String, CliError> {
        fs::write(self.path(file), bytes)?;
        self.register(file)
    }

    pub fn commit(self, mut manifest: Manifest) -> Result<PathBuf, CliError> {
        manifest.artifacts = self.artifacts.clone();
        fs::write(self.path(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        if self.target.exists() {
            if !self.force {
                return Err(CliError::Config(format!("{} appeared while running", self.target.display())));
            }
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
