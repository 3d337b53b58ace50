use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

/// Provenance record written once into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Hash over every input file; see [`InputHasher`].
    pub input_hash: String,
    pub input_files: usize,
    pub started: String,
    pub finished: String,
    /// Fully resolved configuration, defaults included.
    pub config: toml::Table,
    /// Warnings worth keeping with the outputs, such as skipped clips.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string_pretty(self).context("serialising run manifest")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

/// Git-style content hash: each file is hashed as `blob <len>\0<bytes>`,
/// then the sorted `(label, digest)` list is hashed again.
#[derive(Default)]
pub struct InputHasher {
    entries: Vec<(String, String)>,
}

impl InputHasher {
    pub fn add_bytes(&mut self, label: &str, bytes: &[u8]) {
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
        self.entries.push((label.to_string(), hex::encode(h.finalize())));
    }

    pub fn add_file(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.add_bytes(label, &bytes);
        Ok(())
    }

    /// Adds every regular file below `dir`, labelled by its relative path.
    pub fn add_tree(&mut self, label: &str, dir: &Path) -> anyhow::Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap_or(&path);
                    self.add_file(&format!("{label}/{}", rel.display()), &path)?;
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn finish(mut self) -> String {
        self.entries.sort();
        let mut h = Sha256::new();
        for (label, digest) in &self.entries {
            h.update(format!("{digest}  {label}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }
}
