//! Artifact bookkeeping. Each command ends by writing
//! `manifest_<command>.toml`, which together with the embedded config echo
//! is enough to rerun it and check the outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    result: &'a str,
    exit_code: u8,
    config_sha256: String,
    config: &'a str,
    inputs: &'a [FileHash],
    artifacts: &'a [FileHash],
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Outputs {
    dir: PathBuf,
    command: &'static str,
    seed: u64,
    config: String,
    pub result: String,
    inputs: Vec<FileHash>,
    artifacts: Vec<FileHash>,
}

impl Outputs {
    pub fn new(dir: &Path, command: &'static str, config: &RunConfig) -> Self {
        Self {
            dir: dir.to_path_buf(),
            command,
            seed: config.simulation.seed,
            config: config.echo(),
            result: "ok".into(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Renders to memory, then writes and hashes the file.
    pub fn write<F>(&mut self, name: &str, render: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> mfe_core::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write_bytes(name, &buf)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        self.write_bytes(name, text.as_bytes())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(FileHash {
            name: name.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Files are recorded by name only so the manifest does not depend on
    /// where the run happened.
    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.inputs.push(FileHash {
            name,
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
    }

    pub fn artifacts(&self) -> &[FileHash] {
        &self.artifacts
    }

    pub fn manifest_name(&self) -> String {
        format!("manifest_{}.toml", self.command.replace('-', "_"))
    }

    pub fn finish(&mut self, exit_code: u8) -> anyhow::Result<()> {
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            result: &self.result,
            exit_code,
            config_sha256: sha256_hex(self.config.as_bytes()),
            config: &self.config,
            inputs: &self.inputs,
            artifacts: &self.artifacts,
        };
        let text = toml::to_string(&manifest).context("serializing manifest")?;
        let path = self.dir.join(self.manifest_name());
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
