use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::Config;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: 0.0,
        }
    }

    pub fn write(mut self, path: &Path, started: Instant) -> Result<()> {
        self.duration_secs = started.elapsed().as_secs_f64();
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
        log::info!("{} finished in {:.1}s; manifest at {}", self.command, self.duration_secs, path.display());
        Ok(())
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// `out.jsonl` gets `out.manifest.json`.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_owned();
    name.push(".manifest.json");
    out.with_file_name(name)
}
