use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use samtl::data::sha256_hex;

/// Everything needed to replay a command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: &'static str,
    /// SHA-256 of the running executable.
    pub code_hash: String,
    pub config: serde_json::Value,
    /// Input file path to SHA-256.
    pub datasets: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: Option<String>,
}

/// A command's output directory and its manifest.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn executable_hash() -> String {
    std::env::current_exe().and_then(std::fs::read).map(|b| sha256_hex(&b)).unwrap_or_else(|_| "unknown".into())
}

impl RunDir {
    /// Creates `explicit`, or a new `<root>/<command>-<timestamp>` directory.
    pub fn create(root: &Path, explicit: Option<&Path>, command: &str) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
                let base = root.join(format!("{command}-{stamp}"));
                let mut path = base.clone();
                let mut k = 2;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                path
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let manifest = RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            code_hash: executable_hash(),
            config: serde_json::Value::Null,
            datasets: BTreeMap::new(),
            seeds: Vec::new(),
            started_at: now(),
            finished_at: None,
            status: None,
        };
        Ok(Self { path, manifest })
    }

    /// Records the checksum of an input file.
    pub fn add_dataset(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest.datasets.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path.join("manifest.json"), text).context("writing manifest.json")
    }

    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.finished_at = Some(now());
        self.manifest.status = Some(match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e:#}"),
        });
        self.write_manifest()
    }
}
