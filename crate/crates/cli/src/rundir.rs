//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    config_hash: String,
    seeds: Vec<u64>,
    artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    /// Relative path → SHA-256 of the file contents.
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates `<output>/<UTC timestamp>-<command>-<hash prefix>`, or
    /// `explicit` when given.
    pub fn create(
        config: &ExperimentConfig,
        command: &str,
        seeds: Vec<u64>,
        explicit: Option<&Path>,
    ) -> anyhow::Result<Self> {
        let hash = config.hash();
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                let base = format!("{stamp}-{command}-{}", &hash[..12]);
                let mut path = config.paths.output.join(&base);
                let mut k = 2;
                while path.exists() {
                    path = config.paths.output.join(format!("{base}-{k}"));
                    k += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut run = Self {
            path,
            command: command.to_string(),
            config_hash: hash,
            seeds,
            artifacts: Vec::new(),
        };
        run.write("config.json", serde_json::to_string_pretty(config)? + "\n")?;
        Ok(run)
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    /// Registers a file already written under the run directory.
    pub fn register(&mut self, rel: impl Into<PathBuf>) {
        self.artifacts.push(rel.into());
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.file(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.register(rel);
        Ok(path)
    }

    pub fn finish(self) -> anyhow::Result<PathBuf> {
        let mut artifacts = BTreeMap::new();
        for rel in &self.artifacts {
            let bytes = fs::read(self.path.join(rel))?;
            artifacts.insert(rel.display().to_string(), hex(&Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            command: &self.command,
            config_hash: &self.config_hash,
            seeds: &self.seeds,
            artifacts,
        };
        fs::write(
            self.path.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(self.path)
    }
}
