//! Per-command run record, written as `<command>-manifest.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use meki::{storage, Result};
use serde_json::{json, Map, Value};

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug)]
pub struct Manifest {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    started: u64,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    extra: Map<String, Value>,
}

impl Manifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: None,
            seed: None,
            started: unix_now(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn config(mut self, path: &Path) -> Self {
        self.config = Some(path.to_path_buf());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.extra.insert(key.to_string(), value.into());
    }

    fn hashes(paths: &[PathBuf]) -> Result<Value> {
        let mut out = Map::new();
        for p in paths {
            out.insert(p.display().to_string(), json!(format!("{:016x}", storage::file_hash(p)?)));
        }
        Ok(Value::Object(out))
    }

    /// Hash inputs and artifacts and write the record into `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let doc = json!({
            "command": self.command,
            "config": self.config.as_ref().map(|p| p.display().to_string()),
            "seed": self.seed,
            "output_dir": dir.display().to_string(),
            "started_unix": self.started,
            "finished_unix": unix_now(),
            "inputs": Self::hashes(&self.inputs)?,
            "artifacts": Self::hashes(&self.artifacts)?,
            "details": Value::Object(self.extra),
        });
        let path = dir.join(format!("{}-manifest.json", self.command));
        let text = serde_json::to_string_pretty(&doc).map_err(|e| meki::Error::Internal(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
