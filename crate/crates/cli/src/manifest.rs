use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    pub config_digest: Option<String>,
    pub environment_digest: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub ended_unix_ms: Option<u64>,
    pub status: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A manifest that has been written in its "running" state. `finish`
/// consumes it, so it can only be finalized once.
pub struct OpenManifest {
    path: PathBuf,
    manifest: RunManifest,
}

impl RunManifest {
    pub fn new(run_id: &str, subcommand: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            subcommand: subcommand.to_string(),
            config_digest: None,
            environment_digest: None,
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            ended_unix_ms: None,
            status: "running".into(),
        }
    }

    pub fn start(self, path: &Path) -> std::io::Result<OpenManifest> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write(path, &self)?;
        Ok(OpenManifest {
            path: path.to_path_buf(),
            manifest: self,
        })
    }
}

fn write(path: &Path, m: &RunManifest) -> std::io::Result<()> {
    let body = serde_json::to_string_pretty(m).expect("manifest serializes") + "\n";
    std::fs::write(path, body)
}

impl OpenManifest {
    pub fn finish(mut self, ok: bool) -> std::io::Result<()> {
        self.manifest.ended_unix_ms = Some(now_ms());
        self.manifest.status = if ok { "succeeded" } else { "failed" }.into();
        write(&self.path, &self.manifest)
    }
}
