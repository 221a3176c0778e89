//! Run manifests written beside command outputs.
//!
//! A manifest records the command, its effective configuration and a
//! SHA-256 of every input and output file. It contains no timestamps, so a
//! rerun with the same inputs reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<FileRef>,
    pub inputs: BTreeMap<String, FileRef>,
    pub outputs: BTreeMap<String, FileRef>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn file_ref(path: &Path) -> Result<FileRef> {
    Ok(FileRef {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed: None,
            checkpoint: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn checkpoint(mut self, path: &Path) -> Result<Self> {
        self.checkpoint = Some(file_ref(path)?);
        Ok(self)
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.to_string(), file_ref(path)?);
        Ok(self)
    }

    pub fn output(mut self, role: &str, path: &Path) -> Result<Self> {
        self.outputs.insert(role.to_string(), file_ref(path)?);
        Ok(self)
    }

    /// Writes `<file>.manifest.json`, or `manifest.json` inside a directory.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut name = output.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            output.with_file_name(name)
        };
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json + "\n").with_context(|| format!("write {}", path.display()))?;
        Ok(path)
    }
}
