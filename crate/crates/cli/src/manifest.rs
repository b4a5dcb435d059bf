//! Per-run manifest written next to each command's output.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    /// SHA-256 over `blob <len>\0<content>`, the git object framing.
    pub sha256: String,
}

pub fn git_style_digest(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

pub fn digest_file(path: &Path) -> std::io::Result<FileDigest> {
    let data = std::fs::read(path)?;
    Ok(FileDigest { path: path.display().to_string(), bytes: data.len() as u64, sha256: git_style_digest(&data) })
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Resolved configuration in TOML form.
    pub config: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            tool: format!("fvn {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(digest_file(path)?);
        Ok(())
    }

    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        self.finished_at = now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, text + "\n")
    }
}

/// `<out>.manifest.json`, or `<out>/manifest.json` for directory outputs.
pub fn default_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
