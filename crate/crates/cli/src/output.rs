use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub tool_version: String,
    /// SHA-256 of the config file bytes.
    pub config_hash: String,
    pub outputs: Vec<String>,
}

/// Output directory that refuses to overwrite files unless forced.
pub struct OutputDir {
    dir: PathBuf,
    force: bool,
    written: Vec<String>,
}

impl OutputDir {
    pub fn new(dir: &Path, force: bool) -> Self {
        Self { dir: dir.to_path_buf(), force, written: Vec::new() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Fails before any work is done if one of `names` exists.
    pub fn check(&self, names: &[String]) -> Result<(), CliError> {
        if self.force {
            return Ok(());
        }
        for name in names {
            let p = self.path(name);
            if p.exists() {
                return Err(CliError::Config(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        self.check(&[name.to_string()])?;
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.path(name), contents)?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))? + "\n";
        self.write(name, &text)
    }

    /// Records a file written by someone else (e.g. a dataset sidecar).
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn ensure_dir(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    pub fn finish(mut self, command: &str, config_path: &Path, config_text: &str, seed: Option<u64>) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            output_dir: self.dir.clone(),
            seed_override: seed,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config_text),
            outputs: self.written.clone(),
        };
        let name = manifest_name(command);
        self.write_json(&name, &manifest)
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::new(dir.path(), false);
        out.write("a.txt", "1").unwrap();
        assert!(matches!(out.write("a.txt", "2"), Err(CliError::Config(_))));
        let mut forced = OutputDir::new(dir.path(), true);
        forced.write("a.txt", "3").unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("a.txt")).unwrap(), "3");
    }

    #[test]
    fn sha256_reference() {
        assert_eq!(config_hash("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
