use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cfsdcn::io;
use serde::Serialize;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CFSDCN_GIT_DESCRIBE"), ")");

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Record of one command invocation: enough to rerun it and find every file
/// it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: format!("cfsdcn {VERSION}"),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0.0,
        }
    }

    pub fn config(mut self, value: impl Serialize) -> Self {
        self.config = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn add(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn add_pair(&mut self, (a, b): (PathBuf, PathBuf)) {
        self.add(a);
        self.add(b);
    }

    /// Writes the manifest to `path` and lists it among its own artifacts.
    pub fn finish(mut self, path: &Path) -> cfsdcn::Result<PathBuf> {
        self.finished_unix = unix_now();
        self.add(path);
        io::write_json(path, &self)?;
        Ok(path.to_path_buf())
    }
}

/// Manifest location for a command writing a single file: `<stem>.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let (json, _) = io::paired_paths(out);
    json.with_extension("manifest.json")
}
