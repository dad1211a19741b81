//! Append-only run records: one JSON line per command invocation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

pub const FILE_NAME: &str = "runs.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Effective configuration after applying file and flag overrides.
    pub config: serde_json::Value,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value, started: f64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            started,
            finished: started,
            artifacts: Vec::new(),
        }
    }

    /// Stamps the finish time and appends the record to `dir/runs.jsonl`.
    pub fn append_to(mut self, dir: &Path) -> anyhow::Result<()> {
        self.finished = now();
        let path = dir.join(FILE_NAME);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let line = serde_json::to_string(&self)?;
        writeln!(f, "{line}").with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
