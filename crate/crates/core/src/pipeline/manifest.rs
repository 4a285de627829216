use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::format::write_jsonl;
use crate::lm::{save_model, ModelState, Real};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of an ordered id list, used to pin corpora.
pub fn ids_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: String,
    /// Corpus name to id-list hash.
    pub corpora: Vec<(String, String)>,
    pub checkpoints: Vec<Artifact>,
    pub datasets: Vec<Artifact>,
    pub metrics: Vec<Artifact>,
    /// Free-form notes such as which student scored which RL steps.
    pub notes: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, line: 1, source })
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &Artifact> {
        self.checkpoints.iter().chain(&self.datasets).chain(&self.metrics)
    }

    pub fn find(&self, name: &str) -> Option<&Artifact> {
        self.artifacts().find(|a| a.name == name)
    }

    /// Every referenced artifact exists and matches its recorded hash, and
    /// the stored config still hashes to `config_hash`.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        if self.config.hash() != self.config_hash {
            return Err(Error::Manifest("config hash mismatch".into()));
        }
        for a in self.artifacts() {
            let path = dir.as_ref().join(&a.path);
            let actual = sha256_file(&path).map_err(|_| Error::Manifest(format!("missing artifact {}", path.display())))?;
            if actual != a.sha256 {
                return Err(Error::Manifest(format!("hash mismatch for {}", path.display())));
            }
        }
        Ok(())
    }
}

/// A run directory holding one pipeline's artifacts and manifest. Only one
/// `RunDir` can be open per directory; the lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
    lock: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>, pipeline: &str, config: &RunConfig) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let lock = root.join(LOCK_FILE);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::Manifest(format!("{} is locked by another pipeline", root.display()))
                }
                _ => Error::io(&lock, e),
            })?;
        use std::io::Write;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self {
            manifest: RunManifest {
                pipeline: pipeline.into(),
                seed: config.seed,
                config: config.clone(),
                config_hash: config.hash(),
                corpora: Vec::new(),
                checkpoints: Vec::new(),
                datasets: Vec::new(),
                metrics: Vec::new(),
                notes: serde_json::Value::Object(Default::default()),
                started_unix: now_unix(),
                finished_unix: None,
            },
            root,
            lock,
        })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn artifact(&self, name: &str, rel: &Path) -> Result<Artifact> {
        Ok(Artifact {
            name: name.into(),
            path: rel.to_path_buf(),
            sha256: sha256_file(self.path(rel))?,
        })
    }

    pub fn add_corpus<'a>(&mut self, name: &str, ids: impl IntoIterator<Item = &'a str>) {
        self.manifest.corpora.push((name.into(), ids_hash(ids)));
    }

    pub fn save_checkpoint<F: Real>(&mut self, name: &str, model: &ModelState<F>) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("{name}.ckpt"));
        save_model(model, self.path(&rel))?;
        let a = self.artifact(name, &rel)?;
        self.manifest.checkpoints.push(a);
        Ok(self.path(rel))
    }

    pub fn write_dataset<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("{name}.jsonl"));
        write_jsonl(self.path(&rel), rows)?;
        let a = self.artifact(name, &rel)?;
        self.manifest.datasets.push(a);
        Ok(self.path(rel))
    }

    pub fn write_metrics<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let rel = PathBuf::from(format!("{name}.metrics.jsonl"));
        write_jsonl(self.path(&rel), rows)?;
        let a = self.artifact(name, &rel)?;
        self.manifest.metrics.push(a);
        Ok(self.path(rel))
    }

    pub fn note(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(m) = &mut self.manifest.notes {
            m.insert(key.into(), value);
        }
    }

    /// Writes the manifest with a finish time and releases the lock.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = Some(now_unix());
        let path = self.path(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|source| Error::Json { path: path.clone(), line: 1, source })?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}
