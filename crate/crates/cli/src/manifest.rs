use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the root under which run directories go.
pub const OUT_ROOT_VAR: &str = "DCL_OUT_ROOT";

/// Written as `manifest.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Relative to the run directory.
    pub outputs: Vec<String>,
    pub elapsed_secs: f64,
    pub threads: usize,
    pub config: serde_json::Value,
}

pub fn version() -> String {
    match option_env!("DCL_GIT_REV") {
        Some(rev) => format!("v{}-g{rev}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// `--out` if given, else `$DCL_OUT_ROOT/<command>/<hash prefix>` with the
/// root defaulting to `runs`.
pub fn run_dir(out: Option<&Path>, command: &str, config_hash: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command.replace(' ', "-")).join(&config_hash[..12])
        }
    }
}

pub struct RunContext {
    pub command: String,
    pub dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    started: Instant,
}

impl RunContext {
    pub fn new<T: Serialize>(command: &str, out: Option<&Path>, cfg: &T, seed: u64) -> Result<Self> {
        let config_hash = dcl_core::io::config_hash(cfg)?;
        let dir = run_dir(out, command, &config_hash);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            command: command.to_string(),
            dir,
            config_hash,
            seed,
            config: serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?,
            started: Instant::now(),
        })
    }

    pub fn stamp(&self) -> dcl_core::io::Stamp {
        dcl_core::io::Stamp {
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn finish(self, outputs: &[PathBuf]) -> Result<RunManifest> {
        let rel = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect();
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            version: version(),
            outputs: rel,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            config: self.config,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
