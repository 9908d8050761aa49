//! The `run.toml` every command leaves in its output directory.

use anyhow::{Context, Result};
use cfan::util::sha256_hex;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const FILE: &str = "run.toml";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the command's effective parameters.
    pub config_hash: String,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// Starts a manifest; `params` is anything that serialises to TOML and
    /// pins down the command's behaviour.
    pub fn new<T: Serialize>(command: &str, seed: u64, params: &T) -> Result<Self> {
        #[derive(Serialize)]
        struct Wrap<'a, T> {
            params: &'a T,
        }
        let text = toml::to_string(&Wrap { params }).context("serialising parameters")?;
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: sha256_hex(format!("{command}\nseed = {seed}\n{text}").as_bytes()),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Records the checksum of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records a dataset by its manifest file.
    pub fn dataset(&mut self, dir: &Path) -> Result<()> {
        self.input(&dir.join(cfan::synth::MANIFEST_FILE))
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(mut self, out: &Path) -> Result<PathBuf> {
        self.outputs.sort();
        let path = out.join(FILE);
        let text = toml::to_string(&self).context("serialising manifest")?;
        cfan::container::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
