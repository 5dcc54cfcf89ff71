//! Run directories and their manifests.
//!
//! Every command writes into a fresh directory named by timestamp, command
//! and config hash. `manifest.json` lists everything needed to re-run or
//! evaluate it; paths inside are relative to the run directory.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.log";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunDir {
    /// Creates `parent/{timestamp}-{command}-{hash8}`, adding a numeric
    /// suffix if that name is taken.
    pub fn create(parent: &Path, command: &str, config_hash: &str) -> Result<RunDir> {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let short = &config_hash[..config_hash.len().min(8)];
        let base = format!("{stamp}-{command}-{short}");
        for n in 0.. {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let root = parent.join(name);
            match fs::create_dir(&root) {
                Ok(()) => return Ok(RunDir { root }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(&root, e)),
            }
        }
        unreachable!("unbounded suffix search")
    }

    /// Uses `root` as-is, creating it when missing.
    pub fn at(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    /// Opens an existing run directory.
    pub fn open(root: &Path) -> Result<RunDir> {
        if !root.join(MANIFEST_FILE).is_file() {
            return Err(Error::Config(format!("{} is not a run directory (no {MANIFEST_FILE})", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Appends a timestamped line to `events.log` and mirrors it to the logger.
    pub fn log(&self, msg: impl AsRef<str>) -> Result<()> {
        let msg = msg.as_ref();
        log::info!("{msg}");
        let path = self.join(EVENTS_FILE);
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{} {msg}", now()).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub created: String,
    pub updated: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub dataset: Option<DatasetRef>,
    /// Patient ids per pool.
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub verdicts: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub metrics: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub counters: BTreeMap<String, u64>,
    /// Other referenced files (trace, events log, reports).
    #[serde(default)]
    pub files: BTreeMap<String, PathBuf>,
    /// Free-form summary values (best epoch, validation Dice, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let t = now();
        RunManifest {
            command: command.to_string(),
            created: t.clone(),
            updated: t,
            config_hash: crate::models::json_hash(&config),
            config,
            seed,
            dataset: None,
            splits: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            verdicts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            counters: BTreeMap::new(),
            files: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    fn referenced(&self) -> impl Iterator<Item = &PathBuf> {
        self.checkpoints.values().chain(self.metrics.values()).chain(self.files.values())
    }

    /// Writes `manifest.json`, refusing if any referenced file is missing.
    pub fn save(&mut self, run: &RunDir) -> Result<()> {
        for rel in self.referenced() {
            let p = run.join(rel);
            if !p.exists() {
                return Err(Error::Contract(format!("manifest references missing file {}", p.display())));
            }
        }
        self.updated = now();
        let path = run.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(run: &RunDir) -> Result<RunManifest> {
        let path = run.join(MANIFEST_FILE);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))
    }
}
