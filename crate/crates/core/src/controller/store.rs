//! Run records on disk: `runs/<sha256>.json` holds one record each, named by
//! the digest of its bytes, and `index.json` maps run ids to their current
//! digest. Files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::record::{RunRecord, RunStatus};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run {0} already stored")]
    Exists(String),
    #[error("stored record {0} does not match its digest")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run_id: String,
    pub digest: String,
    pub created_at_ms: u64,
    pub scenario_id: String,
    pub status: RunStatus,
    /// Earlier digests of the same run, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<String>,
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    index_lock: Mutex<()>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let name = format!(
            ".tmp-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let path = dir.join(name);
        match fs::File::options().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<RunStore, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        Ok(RunStore {
            root,
            index_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    fn record_path(&self, digest: &str) -> PathBuf {
        self.root.join("runs").join(format!("{digest}.json"))
    }

    fn read_index(&self) -> Result<Vec<IndexEntry>, StoreError> {
        match fs::read(self.index_path()) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn write_index(&self, index: &[IndexEntry]) -> Result<(), StoreError> {
        write_atomic(&self.index_path(), &serde_json::to_vec_pretty(index)?)?;
        Ok(())
    }

    fn write_record(&self, record: &RunRecord) -> Result<String, StoreError> {
        let bytes = record.to_json().into_bytes();
        let d = digest(&bytes);
        let path = self.record_path(&d);
        if !path.exists() {
            write_atomic(&path, &bytes)?;
        }
        Ok(d)
    }

    /// Stores a new run. Returns the content digest.
    pub fn persist(&self, record: &RunRecord) -> Result<String, StoreError> {
        let d = self.write_record(record)?;
        let _guard = self.index_lock.lock().expect("index lock");
        let mut index = self.read_index()?;
        if index.iter().any(|e| e.run_id == record.run_id) {
            return Err(StoreError::Exists(record.run_id.clone()));
        }
        index.push(IndexEntry {
            run_id: record.run_id.clone(),
            digest: d.clone(),
            created_at_ms: record.created_at_ms,
            scenario_id: record.scenario.scenario_id.clone(),
            status: record.status,
            history: Vec::new(),
        });
        self.write_index(&index)?;
        Ok(d)
    }

    /// Stores a new version of an existing run; the previous content stays on
    /// disk and is listed in the entry's history.
    pub fn replace(&self, record: &RunRecord) -> Result<String, StoreError> {
        let d = self.write_record(record)?;
        let _guard = self.index_lock.lock().expect("index lock");
        let mut index = self.read_index()?;
        let entry = index
            .iter_mut()
            .find(|e| e.run_id == record.run_id)
            .ok_or_else(|| StoreError::NotFound(record.run_id.clone()))?;
        if entry.digest != d {
            let old = std::mem::replace(&mut entry.digest, d.clone());
            entry.history.push(old);
            entry.status = record.status;
        }
        self.write_index(&index)?;
        Ok(d)
    }

    pub fn entry(&self, run_id: &str) -> Result<IndexEntry, StoreError> {
        self.read_index()?
            .into_iter()
            .find(|e| e.run_id == run_id)
            .ok_or_else(|| StoreError::NotFound(run_id.to_string()))
    }

    /// Stored JSON of the current version, verified against its digest.
    pub fn load_bytes(&self, run_id: &str) -> Result<Vec<u8>, StoreError> {
        let entry = self.entry(run_id)?;
        let bytes = fs::read(self.record_path(&entry.digest))?;
        if digest(&bytes) != entry.digest {
            return Err(StoreError::Corrupt(run_id.to_string()));
        }
        Ok(bytes)
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        Ok(serde_json::from_slice(&self.load_bytes(run_id)?)?)
    }

    /// Index entries ordered by creation time, then run id.
    pub fn list(&self) -> Result<Vec<IndexEntry>, StoreError> {
        let mut index = self.read_index()?;
        index.sort_by(|a, b| a.created_at_ms.cmp(&b.created_at_ms).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(index)
    }
}
