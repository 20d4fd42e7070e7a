use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_RECORD_FILE: &str = "run.json";

/// What a command did, written into its output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to `out_dir` where possible.
    pub artifacts: Vec<PathBuf>,
    /// The configuration after CLI overrides were applied.
    pub resolved_config: serde_json::Value,
}

pub struct RunLog {
    command: &'static str,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: PathBuf,
    started: SystemTime,
    artifacts: Vec<PathBuf>,
    resolved_config: serde_json::Value,
}

impl RunLog {
    pub fn start(command: &'static str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(RunLog {
            command,
            config_path: None,
            seed: None,
            out_dir: out_dir.to_path_buf(),
            started: SystemTime::now(),
            artifacts: Vec::new(),
            resolved_config: serde_json::Value::Null,
        })
    }

    pub fn config(&mut self, path: Option<&Path>, resolved: impl Serialize) {
        self.config_path = path.map(Path::to_path_buf);
        self.resolved_config = serde_json::to_value(resolved).unwrap_or(serde_json::Value::Null);
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn artifact(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out_dir).unwrap_or(path);
        self.artifacts.push(rel.to_path_buf());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let path = self.out_dir.join(RUN_RECORD_FILE);
        self.artifacts.push(PathBuf::from(RUN_RECORD_FILE));
        let record = RunRecord {
            command: self.command.to_owned(),
            config_path: self.config_path,
            seed: self.seed,
            out_dir: self.out_dir,
            started_at: humantime::format_rfc3339_seconds(self.started).to_string(),
            finished_at: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
            artifacts: self.artifacts,
            resolved_config: self.resolved_config,
        };
        let text = serde_json::to_string_pretty(&record)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
