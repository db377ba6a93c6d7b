use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced a run directory and the hash of every file in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub git_describe: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Relative path to lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn begin<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed,
            config: serde_json::to_value(config)?,
            git_describe: git_describe(),
            started_unix: now(),
            finished_unix: 0,
            files: BTreeMap::new(),
        })
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest atomically.
    pub fn finish(mut self, dir: impl AsRef<Path>, files: &[String]) -> Result<Self> {
        let dir = dir.as_ref();
        for f in files {
            self.files.insert(f.clone(), file_sha256(dir.join(f))?);
        }
        self.finished_unix = now();
        let text = serde_json::to_string_pretty(&self)?;
        write_atomic(dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose current hash differs from the recorded one.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        let mut bad = Vec::new();
        for (f, h) in &self.files {
            match file_sha256(dir.join(f)) {
                Ok(actual) if &actual == h => {}
                Ok(_) => bad.push(f.clone()),
                Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => bad.push(f.clone()),
                Err(e) => return Err(e),
            }
        }
        Ok(bad)
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output_dir(dir: impl AsRef<Path>, force: bool) -> Result<()> {
    let dir = dir.as_ref();
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}
