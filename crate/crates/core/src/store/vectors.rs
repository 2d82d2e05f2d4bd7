use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::injection::{ContextVector, Provenance};

/// One stored global context vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorEntry {
    pub id: u64,
    /// Serialized IFCV blob.
    pub bytes: Vec<u8>,
    /// Fingerprint of the model the vector was extracted from.
    pub fingerprint: u64,
}

impl VectorEntry {
    pub fn vector(&self) -> Result<ContextVector> {
        ContextVector::decode(&self.bytes, Provenance::Unspecified)
    }
}

/// Context vectors addressed by sequential ids.
pub trait VectorStore: Send + Sync {
    /// Store a blob and return its id. The blob must decode as IFCV.
    fn insert(&mut self, bytes: Vec<u8>, fingerprint: u64) -> Result<u64>;

    fn get(&self, id: u64) -> Option<&VectorEntry>;

    /// Entries in insertion order.
    fn entries(&self) -> &[VectorEntry];
}

fn check_blob(bytes: &[u8]) -> Result<()> {
    ContextVector::decode(bytes, Provenance::Unspecified).map(|_| ())
}

#[derive(Debug, Default, Clone)]
pub struct MemoryVectorStore {
    entries: Vec<VectorEntry>,
}

impl MemoryVectorStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl VectorStore for MemoryVectorStore {
    fn insert(&mut self, bytes: Vec<u8>, fingerprint: u64) -> Result<u64> {
        check_blob(&bytes)?;
        let id = self.entries.len() as u64;
        self.entries.push(VectorEntry { id, bytes, fingerprint });
        Ok(id)
    }

    fn get(&self, id: u64) -> Option<&VectorEntry> {
        usize::try_from(id).ok().and_then(|i| self.entries.get(i))
    }

    fn entries(&self) -> &[VectorEntry] {
        &self.entries
    }
}

/// Concatenated frames: frame length u32 LE, model fingerprint u64 LE,
/// then the IFCV blob. A frame's id is its position in the file.
#[derive(Debug)]
pub struct FileVectorStore {
    path: PathBuf,
    file: File,
    inner: MemoryVectorStore,
}

const FRAME_PREFIX: usize = 4 + 8;

impl FileVectorStore {
    pub fn open(path: &Path) -> Result<Self> {
        let mut inner = MemoryVectorStore::new();
        if path.exists() {
            let data = std::fs::read(path)?;
            let mut at = 0;
            while at < data.len() {
                let corrupt = |why: &str| Error::Store(format!("{} at byte {at}: {why}", path.display()));
                if data.len() - at < FRAME_PREFIX {
                    return Err(corrupt("truncated frame header"));
                }
                let len = u32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes")) as usize;
                let fingerprint = u64::from_le_bytes(data[at + 4..at + 12].try_into().expect("8 bytes"));
                let start = at + FRAME_PREFIX;
                if data.len() - start < len {
                    return Err(corrupt("truncated frame body"));
                }
                inner
                    .insert(data[start..start + len].to_vec(), fingerprint)
                    .map_err(|e| corrupt(&e.to_string()))?;
                at = start + len;
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
}

impl VectorStore for FileVectorStore {
    fn insert(&mut self, bytes: Vec<u8>, fingerprint: u64) -> Result<u64> {
        check_blob(&bytes)?;
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Encode("vector blob exceeds u32".into()))?;
        let mut frame = Vec::with_capacity(FRAME_PREFIX + bytes.len());
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&fingerprint.to_le_bytes());
        frame.extend_from_slice(&bytes);
        self.file.write_all(&frame)?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.inner.insert(bytes, fingerprint)
    }

    fn get(&self, id: u64) -> Option<&VectorEntry> {
        self.inner.get(id)
    }

    fn entries(&self) -> &[VectorEntry] {
        self.inner.entries()
    }
}
