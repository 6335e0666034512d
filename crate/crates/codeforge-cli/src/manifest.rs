//! Run manifests: every artifact-producing subcommand records its fully
//! resolved configuration next to its outputs, enough to reproduce the
//! run byte for byte (single-threaded mode).

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub toolkit_version: String,
    pub wall_secs: f64,
}

pub struct ManifestBuilder {
    subcommand: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, seed: u64) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            config: serde_json::Value::Null,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn input(mut self, path: impl Into<PathBuf>) -> Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    /// Writes `run_manifest.json` into `dir` atomically (temp + rename).
    pub fn write(self, dir: &Path) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join("run_manifest.json");
        let tmp = dir.join(".run_manifest.json.tmp");
        let body = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(path)
    }
}

/// Seed precedence: explicit flag, then `CODEFORGE_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("CODEFORGE_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}
