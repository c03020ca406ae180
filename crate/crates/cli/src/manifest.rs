use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Code version baked in at build time: git revision plus crate version.
pub fn code_version() -> String {
    format!("{} ({})", env!("MIPAE_GIT_REV"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub data: u64,
    pub test: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// One command invocation against a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub args: Vec<String>,
    pub code_version: String,
    /// Effective configuration after flag overrides.
    pub config: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub inputs: Vec<InputFile>,
    /// Files written, relative to the run directory.
    pub artifacts: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl ManifestEntry {
    pub fn start(command: &str, config: String, seeds: Seeds) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            code_version: code_version(),
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            seeds,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started_unix: now_unix(),
            finished_unix: 0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256: file_sha256(path)? });
        Ok(())
    }
}

/// Every invocation that wrote into a run directory, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Appends a finished entry to `run_dir/manifest.json`, recording every
    /// file in the directory that is newer than the entry's start.
    pub fn record(run_dir: &Path, mut entry: ManifestEntry, artifacts: Vec<PathBuf>) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        let mut m = if path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            RunManifest { run_dir: run_dir.to_path_buf(), entries: Vec::new() }
        };
        entry.artifacts = artifacts;
        entry.finished_unix = now_unix();
        m.entries.push(entry);
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}
