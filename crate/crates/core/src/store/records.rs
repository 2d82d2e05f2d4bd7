use std::fs::{File, OpenOptions};
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::InjectionCoefficients;
use crate::task::{Metrics, Template};

/// FNV-1a 64 over the template's canonical text.
pub fn template_hash(template: &Template) -> u64 {
    let mut h = FnvHasher::default();
    h.write(template.canonical().as_bytes());
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskKey {
    pub task_id: String,
    pub template_hash: u64,
}

impl TaskKey {
    pub fn new(task_id: impl Into<String>, template: &Template) -> Result<Self> {
        let task_id = task_id.into();
        if task_id.is_empty() || task_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Config(format!("task id {task_id:?} must be a non-empty single field")));
        }
        Ok(Self {
            task_id,
            template_hash: template_hash(template),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub key: TaskKey,
    pub coeffs: InjectionCoefficients,
    /// Id of the global context vector in the vector store.
    pub vector_ref: u64,
    pub round: u32,
    pub metrics: Option<Metrics>,
}

/// Task records keyed by task identity. Later puts replace earlier ones.
pub trait RecordStore: Send + Sync {
    fn get(&self, key: &TaskKey) -> Option<&TaskRecord>;

    fn put(&mut self, record: TaskRecord) -> Result<()>;

    /// Drop a record; returns whether one existed.
    fn remove(&mut self, key: &TaskKey) -> Result<bool>;

    /// Records in first-insertion order.
    fn records(&self) -> Vec<&TaskRecord>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryRecordStore {
    records: IndexMap<TaskKey, TaskRecord>,
}

impl MemoryRecordStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RecordStore for MemoryRecordStore {
    fn get(&self, key: &TaskKey) -> Option<&TaskRecord> {
        self.records.get(key)
    }

    fn put(&mut self, record: TaskRecord) -> Result<()> {
        self.records.insert(record.key.clone(), record);
        Ok(())
    }

    fn remove(&mut self, key: &TaskKey) -> Result<bool> {
        Ok(self.records.shift_remove(key).is_some())
    }

    fn records(&self) -> Vec<&TaskRecord> {
        self.records.values().collect()
    }
}

/// Append-only text log, one operation per line, replayed on open:
///
/// ```text
/// put <task id> <hash:16 hex> <IFCC hex> <vector id> <round> <metrics JSON or ->
/// del <task id> <hash:16 hex>
/// ```
///
/// Fields are tab-separated.
#[derive(Debug)]
pub struct FileRecordStore {
    path: PathBuf,
    file: File,
    inner: MemoryRecordStore,
}

impl FileRecordStore {
    pub fn open(path: &Path) -> Result<Self> {
        let mut inner = MemoryRecordStore::new();
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                match parse_line(line).map_err(|reason| Error::Store(format!("{}:{}: {reason}", path.display(), i + 1)))? {
                    LogOp::Put(record) => inner.put(record)?,
                    LogOp::Del(key) => {
                        inner.remove(&key)?;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            inner,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, line: &str) -> Result<()> {
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(())
    }
}

enum LogOp {
    Put(TaskRecord),
    Del(TaskKey),
}

fn format_put(r: &TaskRecord) -> Result<String> {
    let metrics = match &r.metrics {
        Some(m) => serde_json::to_string(m)?,
        None => "-".into(),
    };
    Ok(format!(
        "put\t{}\t{:016x}\t{}\t{}\t{}\t{}",
        r.key.task_id,
        r.key.template_hash,
        hex::encode(r.coeffs.encode()?),
        r.vector_ref,
        r.round,
        metrics
    ))
}

fn parse_key(id: &str, hash: &str) -> std::result::Result<TaskKey, String> {
    Ok(TaskKey {
        task_id: id.to_string(),
        template_hash: u64::from_str_radix(hash, 16).map_err(|_| format!("bad hash {hash:?}"))?,
    })
}

fn parse_line(line: &str) -> std::result::Result<LogOp, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    match fields.as_slice() {
        ["put", id, hash, coeffs, vector_ref, round, metrics] => {
            let bytes = hex::decode(coeffs).map_err(|e| format!("coefficient hex: {e}"))?;
            Ok(LogOp::Put(TaskRecord {
                key: parse_key(id, hash)?,
                coeffs: InjectionCoefficients::decode(&bytes).map_err(|e| e.to_string())?,
                vector_ref: vector_ref.parse().map_err(|_| "bad vector id".to_string())?,
                round: round.parse().map_err(|_| "bad round".to_string())?,
                metrics: match *metrics {
                    "-" => None,
                    json => Some(serde_json::from_str(json).map_err(|e| e.to_string())?),
                },
            }))
        }
        ["del", id, hash] => Ok(LogOp::Del(parse_key(id, hash)?)),
        _ => Err("unrecognised line".into()),
    }
}

impl RecordStore for FileRecordStore {
    fn get(&self, key: &TaskKey) -> Option<&TaskRecord> {
        self.inner.get(key)
    }

    fn put(&mut self, record: TaskRecord) -> Result<()> {
        let line = format_put(&record)?;
        self.append(&line)?;
        self.inner.put(record)
    }

    fn remove(&mut self, key: &TaskKey) -> Result<bool> {
        if self.inner.get(key).is_none() {
            return Ok(false);
        }
        self.append(&format!("del\t{}\t{:016x}", key.task_id, key.template_hash))?;
        self.inner.remove(key)
    }

    fn records(&self) -> Vec<&TaskRecord> {
        self.inner.records()
    }
}
