//! Run manifests: one TOML per invocation recording what produced what.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub threads: usize,
    /// Fully resolved configuration (all defaults materialized).
    pub config: toml::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

pub struct RunRecorder {
    subcommand: String,
    seed: Option<u64>,
    threads: usize,
    started: Instant,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl RunRecorder {
    pub fn new(subcommand: &str, seed: Option<u64>, threads: usize) -> Self {
        RunRecorder {
            subcommand: subcommand.to_string(),
            seed,
            threads,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `run_manifest.toml` into `dir` and returns its path.
    pub fn finish<C: Serialize>(self, dir: &Path, config: &C) -> Result<PathBuf> {
        let manifest = RunManifest {
            tool: "uap".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand,
            seed: self.seed,
            threads: self.threads,
            config: toml::Value::try_from(config).context("serializing resolved config")?,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join("run_manifest.toml");
        std::fs::write(&path, toml::to_string(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// The standard reference string artifacts embed for their run manifest.
pub const RUN_MANIFEST_REF: &str = "run_manifest.toml";
