//! Artifact writer: every file carries the config hash and seeds, and the
//! run ends with a manifest listing what was written.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub struct Artifacts {
    dir: PathBuf,
    command: String,
    config_hash: String,
    seeds: Vec<u64>,
    files: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Artifacts {
    pub fn new(dir: &Path, command: &str, config_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            config_hash,
            seeds,
            files: Vec::new(),
        }
    }

    pub fn provenance(&self) -> Value {
        json!({ "command": self.command, "config_sha256": self.config_hash, "seeds": self.seeds })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.files.push((name.into(), sha256_hex(bytes)));
        Ok(path)
    }

    /// CSV with a leading `#` provenance line.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let text = format!("# config_sha256={} seeds={}\n{body}", self.config_hash, seeds.join(";"));
        self.write(name, text.as_bytes())
    }

    /// `{"provenance": ..., key: data}`
    pub fn json<T: Serialize>(&mut self, name: &str, key: &str, data: &T) -> Result<PathBuf, CliError> {
        let data = serde_json::to_value(data).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut doc = serde_json::Map::new();
        doc.insert("provenance".into(), self.provenance());
        doc.insert(key.into(), data);
        let text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.write(name, text.as_bytes())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        self.write(name, body.as_bytes())
    }

    /// Writes `manifest.json`; call last.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let files: Vec<Value> = self
            .files
            .iter()
            .map(|(n, h)| json!({ "path": n, "sha256": h }))
            .collect();
        let manifest = json!({
            "command": self.command,
            "config_sha256": self.config_hash,
            "seeds": self.seeds,
            "facdiff_version": env!("CARGO_PKG_VERSION"),
            "files": files,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = self.dir.join("manifest.json");
        self.write("manifest.json", text.as_bytes())?;
        Ok(path)
    }
}

/// Reads the payload under `key` from a file written by [`Artifacts::json`].
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let data = doc
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| CliError::Runtime(format!("{} has no {key:?} entry", path.display())))?;
    serde_json::from_value(data).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
