//! Output directory of a run: config snapshot, seed, report and a manifest
//! of every file with its SHA-256.

use std::path::{Path, PathBuf};

use anyhow::Result;
use glosslab::io::{read_bytes, to_json_bytes, write_atomic};
use glosslab::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENIZER_FILE: &str = "tokenizer.model";

pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

impl RunDir {
    /// Creates the directory and writes the config snapshot and seed.
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<RunDir> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let d = RunDir { root: root.to_path_buf() };
        d.write(CONFIG_FILE, cfg.to_toml().as_bytes())?;
        d.write(SEED_FILE, format!("{}\n", cfg.seed).as_bytes())?;
        Ok(d)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        Ok(write_atomic(&self.path(rel), bytes)?)
    }

    /// Writes the report, then the manifest over everything in the directory.
    pub fn finish<T: Serialize>(&self, report: &T) -> Result<()> {
        self.write(REPORT_FILE, &to_json_bytes(report)?)?;
        let mut files = Vec::new();
        collect(&self.root, &self.root, &mut files)?;
        files.sort();
        let entries = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_FILE)
            .map(|rel| {
                let bytes = read_bytes(&self.root.join(&rel))?;
                Ok(ManifestEntry { bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)), path: rel })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write(MANIFEST_FILE, &to_json_bytes(&entries)?)?;
        log::info!("run written to {}", self.root.display());
        Ok(())
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("entry under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
