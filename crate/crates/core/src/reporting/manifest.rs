use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::file_hash;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A file read or written by a command, identified by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(role: &str, path: &Path) -> Result<Self> {
        Ok(Artifact {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: file_hash(path)?,
        })
    }

    /// Whether the file on disk still has the recorded hash.
    pub fn verify(&self) -> Result<bool> {
        Ok(file_hash(&self.path)? == self.sha256)
    }
}

/// Everything needed to replay a command: its arguments, the resolved
/// configuration and hashes of its inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the binary name, as given.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    #[serde(default)]
    pub cwd: PathBuf,
    /// Resolved configuration as TOML.
    pub config: String,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }

    /// Inputs whose current contents differ from the recorded hashes.
    pub fn changed_inputs(&self) -> Result<Vec<&Artifact>> {
        let mut out = Vec::new();
        for a in &self.inputs {
            if !a.verify()? {
                out.push(a);
            }
        }
        Ok(out)
    }
}
