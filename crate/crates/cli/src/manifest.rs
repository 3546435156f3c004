//! Run manifests: everything needed to repeat a command, plus hashes of
//! what it read and wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use memts::model::RunConfig;
use memts::numerics::RNG_ALGORITHM;
use memts::Result;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Full `key = value` snapshot, empty for commands without a config.
    pub config: String,
    /// `(role, description)`; files are described as `path sha256:<hex>`.
    pub inputs: Vec<(String, String)>,
    /// `(file name, sha256)` of artifacts in the output directory.
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Option<&RunConfig>) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: config.map(RunConfig::to_kv).unwrap_or_default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let hash = sha256_hex(&fs::read(path)?);
        self.inputs.push((role.to_string(), format!("{} sha256:{hash}", path.display())));
        Ok(())
    }

    pub fn add_input_text(&mut self, role: &str, desc: &str) {
        self.inputs.push((role.to_string(), desc.to_string()));
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write_output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        self.outputs.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    pub fn output_hash(&self, name: &str) -> Option<&str> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "rng = {RNG_ALGORITHM}");
        for (role, desc) in &self.inputs {
            let _ = writeln!(s, "input.{role} = {desc}");
        }
        for (name, hash) in &self.outputs {
            let _ = writeln!(s, "output.{name} = sha256:{hash}");
        }
        if !self.config.is_empty() {
            s.push_str("[config]\n");
            s.push_str(&self.config);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}
