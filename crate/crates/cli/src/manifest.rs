//! Run manifests: every command writes one JSON manifest next to its primary
//! output so any result is re-derivable from config + seed + tool version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

#[derive(Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    /// Fully resolved configuration snapshot.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<&'static str, String>,
    pub outputs: Vec<String>,
    pub wall_ms: u128,
}

pub struct ManifestBuilder {
    command: &'static str,
    started: Instant,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<&'static str, String>,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, seed: u64) -> Self {
        ManifestBuilder {
            command,
            started: Instant::now(),
            seed,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(mut self, value: serde_json::Value) -> Self {
        self.config = value;
        self
    }

    pub fn input(mut self, name: &'static str, path: &Path) -> Self {
        self.inputs.insert(name, path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Write `<primary>.manifest.json`.
    pub fn write(self, primary_output: &Path) -> std::io::Result<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_ms: self.started.elapsed().as_millis(),
        };
        let mut path = primary_output.as_os_str().to_owned();
        path.push(".manifest.json");
        let path = PathBuf::from(path);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest json"))?;
        Ok(path)
    }
}
