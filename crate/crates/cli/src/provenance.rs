//! Artifact sidecars and small writers shared by the commands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const TOOL: &str = "gapflight";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identity stamped into every artifact.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub command: &'static str,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(command: &'static str, seed: u64, config: &RunConfig) -> Self {
        Self { command, seed, config: config.clone(), config_hash: config.hash() }
    }

    pub fn header(&self) -> Value {
        json!({
            "tool": TOOL,
            "version": VERSION,
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
    }

    /// Writes `<artifact>.meta.json` holding the stamp, the resolved config
    /// and `extra`.
    pub fn write_sidecar(&self, artifact: &Path, extra: Value) -> std::io::Result<PathBuf> {
        let mut doc = self.header();
        doc["config"] = serde_json::to_value(&self.config).expect("config serializes");
        doc["artifact"] = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).into();
        doc["details"] = extra;
        let path = sidecar_path(artifact);
        write_json(&path, &doc)?;
        Ok(path)
    }
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Writes a CSV with the given header and rows of already formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(std::io::Error::other)?;
    for row in rows {
        w.write_record(&row).map_err(std::io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)
}

/// Shortest round-trip decimal form; stable across runs.
pub fn num(x: f64) -> String {
    format!("{x}")
}
