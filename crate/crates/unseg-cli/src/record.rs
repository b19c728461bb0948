//! Run records: one replayable config snapshot per CLI invocation.
//!
//! `run.log` accumulates one header line per run (id, command, full flag
//! snapshot) followed by the metric record lines. The deterministic metric
//! records also land in `report.csv`, which is byte-stable across reruns of
//! the same seed; the log line carries the wall-clock id and is not.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use unseg::error::Result;
use unseg::metrics::RECORD_HEADER;

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub id: String,
    pub command: String,
    /// Flag snapshot, in declaration order; replaying these reproduces the
    /// run bit for bit (single-worker loading).
    pub config: Vec<(String, String)>,
    pub records: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunRecord {
    pub fn new(command: &str, config: Vec<(String, String)>) -> Self {
        let mut hasher = DefaultHasher::new();
        command.hash(&mut hasher);
        for (k, v) in &config {
            k.hash(&mut hasher);
            v.hash(&mut hasher);
        }
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        Self {
            id: format!("{:08x}-{stamp}", hasher.finish() as u32),
            command: command.to_string(),
            config,
            records: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn push_record(&mut self, line: String) {
        self.records.push(line);
    }

    pub fn push_artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    fn log_block(&self) -> String {
        let mut out = format!("run {} cmd={}", self.id, self.command);
        for (k, v) in &self.config {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(r);
            out.push('\n');
        }
        for a in &self.artifacts {
            out.push_str(&format!("artifact {}\n", a.display()));
        }
        out
    }

    /// Append to `<out>/run.log` and rewrite `<out>/report.csv` with the
    /// deterministic records.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("run.log"))?;
        log.write_all(self.log_block().as_bytes())?;

        let mut csv = String::from(RECORD_HEADER);
        csv.push('\n');
        for r in &self.records {
            csv.push_str(r);
            csv.push('\n');
        }
        std::fs::write(out_dir.join("report.csv"), csv)?;
        Ok(())
    }
}
