use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use scotoma::{Result, ScotomaError};

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Output directory that records the hash of every file written into it.
pub struct OutDir {
    root: PathBuf,
    manifest: Vec<ManifestEntry>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<OutDir> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            manifest: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.manifest.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| ScotomaError::Data(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `diagnostics.json`: `body` plus the manifest of the files written so far.
    pub fn finish<T: Serialize>(self, body: &T) -> Result<()> {
        let mut value = serde_json::to_value(body).map_err(|e| ScotomaError::Data(e.to_string()))?;
        let manifest = serde_json::to_value(&self.manifest).map_err(|e| ScotomaError::Data(e.to_string()))?;
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("manifest".into(), manifest);
            }
            None => value = serde_json::json!({ "result": value, "manifest": manifest }),
        }
        let mut text = serde_json::to_string_pretty(&value).map_err(|e| ScotomaError::Data(e.to_string()))?;
        text.push('\n');
        fs::write(self.root.join("diagnostics.json"), text)?;
        Ok(())
    }
}

/// Reads and parses a JSON config; any failure is a configuration error.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| ScotomaError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ScotomaError::Config(format!("{}: {e}", path.display())))
}
