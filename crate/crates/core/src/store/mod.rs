//! Server-side task cache: task records (task identity to calibrated
//! coefficients) and a vector store of global context vectors, with a
//! lookup-or-train workflow and exact cosine search.

mod records;
mod vectors;

use std::path::Path;

pub use records::{template_hash, FileRecordStore, MemoryRecordStore, RecordStore, TaskKey, TaskRecord};
pub use vectors::{FileVectorStore, MemoryVectorStore, VectorEntry, VectorStore};

use crate::error::{Error, Result};
use crate::injection::{ContextVector, Dtype, InjectionCoefficients};
use crate::task::Metrics;

pub const RECORD_LOG: &str = "records.log";
pub const VECTOR_FILE: &str = "vectors.bin";

/// What a training run hands back to the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedTask {
    pub vector: ContextVector,
    pub coeffs: InjectionCoefficients,
    pub round: u32,
    pub metrics: Option<Metrics>,
}

/// One hit from a similarity search.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub entry: VectorEntry,
    pub similarity: f64,
}

/// Record and vector stores bound to one serving model. Single writer;
/// entries made under a different model are reported stale.
pub struct TaskStore {
    records: Box<dyn RecordStore>,
    vectors: Box<dyn VectorStore>,
    fingerprint: u64,
}

impl std::fmt::Debug for TaskStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskStore")
            .field("records", &self.records.records().len())
            .field("vectors", &self.vectors.entries().len())
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .finish()
    }
}

impl TaskStore {
    pub fn new(records: Box<dyn RecordStore>, vectors: Box<dyn VectorStore>, fingerprint: u64) -> Self {
        Self {
            records,
            vectors,
            fingerprint,
        }
    }

    pub fn in_memory(fingerprint: u64) -> Self {
        Self::new(
            Box::new(MemoryRecordStore::new()),
            Box::new(MemoryVectorStore::new()),
            fingerprint,
        )
    }

    /// File-backed store in `dir`, created if missing.
    pub fn open(dir: &Path, fingerprint: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self::new(
            Box::new(FileRecordStore::open(&dir.join(RECORD_LOG))?),
            Box::new(FileVectorStore::open(&dir.join(VECTOR_FILE))?),
            fingerprint,
        ))
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn records(&self) -> Vec<&TaskRecord> {
        self.records.records()
    }

    pub fn vector_entries(&self) -> &[VectorEntry] {
        self.vectors.entries()
    }

    /// Store a context vector at full precision and return its id.
    pub fn insert_vector(&mut self, vector: &ContextVector) -> Result<u64> {
        self.vectors.insert(vector.encode(Dtype::F32)?, self.fingerprint)
    }

    fn live_entry(&self, id: u64) -> Result<&VectorEntry> {
        let entry = self
            .vectors
            .get(id)
            .ok_or_else(|| Error::Store(format!("vector {id} does not exist")))?;
        if entry.fingerprint != self.fingerprint {
            return Err(Error::StaleEntry(format!(
                "vector {id} was built for model {:016x}, serving {:016x}",
                entry.fingerprint, self.fingerprint
            )));
        }
        Ok(entry)
    }

    pub fn vector(&self, id: u64) -> Result<ContextVector> {
        self.live_entry(id)?.vector()
    }

    pub fn put_record(&mut self, record: TaskRecord) -> Result<()> {
        let v = self.vector(record.vector_ref)?;
        if v.n_layers() != record.coeffs.n_layers() {
            return Err(Error::Shape(format!(
                "{}-layer coefficients for a {}-layer vector",
                record.coeffs.n_layers(),
                v.n_layers()
            )));
        }
        self.records.put(record)
    }

    /// The record for `key`, or `None`. A record whose vector was made for
    /// another model is a stale-entry error.
    pub fn get_record(&self, key: &TaskKey) -> Result<Option<TaskRecord>> {
        match self.records.get(key) {
            None => Ok(None),
            Some(r) => {
                self.live_entry(r.vector_ref)?;
                Ok(Some(r.clone()))
            }
        }
    }

    /// Manual invalidation; the next lookup of `key` misses.
    pub fn invalidate(&mut self, key: &TaskKey) -> Result<bool> {
        self.records.remove(key)
    }

    pub fn store_trained(&mut self, key: TaskKey, trained: TrainedTask) -> Result<TaskRecord> {
        let vector_ref = self.insert_vector(&trained.vector)?;
        let record = TaskRecord {
            key,
            coeffs: trained.coeffs,
            vector_ref,
            round: trained.round,
            metrics: trained.metrics,
        };
        self.put_record(record.clone())?;
        Ok(record)
    }

    /// Return the cached record for `key`, or run `train`, store its result
    /// and return that. The flag is `true` on a cache hit, in which case
    /// `train` is not called. A failed `train` leaves the store untouched.
    pub fn lookup_or_train<F>(&mut self, key: &TaskKey, train: F) -> Result<(TaskRecord, bool)>
    where
        F: FnOnce() -> Result<TrainedTask>,
    {
        if let Some(record) = self.get_record(key)? {
            return Ok((record, true));
        }
        let trained = train()?;
        Ok((self.store_trained(key.clone(), trained)?, false))
    }

    /// Exact top-`k` stored vectors by cosine similarity to `query`.
    /// Entries of another shape are skipped; equal similarities keep
    /// insertion order.
    pub fn nearest_vector(&self, query: &ContextVector, k: usize) -> Result<Vec<Neighbor>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.vectors.entries().is_empty() {
            return Err(Error::Empty("vector store"));
        }
        let q = query.as_slice();
        let q_norm = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if q_norm == 0.0 {
            return Err(Error::Config("query vector has zero norm".into()));
        }
        let mut hits = Vec::new();
        for entry in self.vectors.entries() {
            let v = entry.vector()?;
            if !v.same_shape(query) {
                continue;
            }
            let (mut dot, mut norm) = (0.0f64, 0.0f64);
            for (&a, &b) in q.iter().zip(v.as_slice()) {
                dot += a as f64 * b as f64;
                norm += (b as f64).powi(2);
            }
            let similarity = if norm == 0.0 { 0.0 } else { dot / (q_norm * norm.sqrt()) };
            hits.push(Neighbor {
                entry: entry.clone(),
                similarity,
            });
        }
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        hits.truncate(k);
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::Provenance;
    use crate::task::{Template, Tokenizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn template(id: &str) -> Template {
        let tok = Tokenizer::new(["yes", "no", "a"]).unwrap();
        Template::standard(id, vec!["yes".into(), "no".into()], &tok).unwrap()
    }

    fn trained(seed: u64) -> TrainedTask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        TrainedTask {
            vector: ContextVector::from_parts(2, 4, data, 5, Provenance::Global { round: 0 }).unwrap(),
            coeffs: InjectionCoefficients::from_values((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            round: 3,
            metrics: Some(Metrics {
                accuracy: 0.75,
                macro_f1: 0.7,
                n_samples: 8,
            }),
        }
    }

    #[test]
    fn get_before_put_is_absent_then_roundtrips() {
        let mut store = TaskStore::in_memory(1);
        let key = TaskKey::new("sentiment", &template("t")).unwrap();
        assert_eq!(store.get_record(&key).unwrap(), None);
        let rec = store.store_trained(key.clone(), trained(1)).unwrap();
        let got = store.get_record(&key).unwrap().unwrap();
        assert_eq!(got, rec);
        assert_eq!(got.coeffs.encode().unwrap(), trained(1).coeffs.encode().unwrap());
    }

    #[test]
    fn lookup_or_train_caches() {
        let mut store = TaskStore::in_memory(1);
        let key = TaskKey::new("t1", &template("a")).unwrap();
        let mut calls = 0;
        let (first, hit) = store
            .lookup_or_train(&key, || {
                calls += 1;
                Ok(trained(2))
            })
            .unwrap();
        assert!(!hit);
        for _ in 0..3 {
            let (again, hit) = store
                .lookup_or_train(&key, || {
                    calls += 1;
                    Ok(trained(3))
                })
                .unwrap();
            assert!(hit);
            assert_eq!(again.coeffs.encode().unwrap(), first.coeffs.encode().unwrap());
        }
        assert_eq!(calls, 1);
        let other = TaskKey::new("t1", &template("b")).unwrap();
        assert_ne!(other, key);
        let (_, hit) = store.lookup_or_train(&other, || Ok(trained(4))).unwrap();
        assert!(!hit);
    }

    #[test]
    fn failed_training_leaves_store_unchanged() {
        let mut store = TaskStore::in_memory(1);
        let key = TaskKey::new("t", &template("a")).unwrap();
        assert!(store
            .lookup_or_train(&key, || Err(Error::NonFinite("boom".into())))
            .is_err());
        assert!(store.records().is_empty());
        assert!(store.vector_entries().is_empty());
    }

    #[test]
    fn invalidation_forces_a_miss() {
        let mut store = TaskStore::in_memory(1);
        let key = TaskKey::new("t", &template("a")).unwrap();
        store.lookup_or_train(&key, || Ok(trained(1))).unwrap();
        assert!(store.invalidate(&key).unwrap());
        assert!(!store.invalidate(&key).unwrap());
        let (_, hit) = store.lookup_or_train(&key, || Ok(trained(1))).unwrap();
        assert!(!hit);
    }

    #[test]
    fn changed_model_makes_entries_stale() {
        let dir = tempfile::tempdir().unwrap();
        let key = TaskKey::new("t", &template("a")).unwrap();
        TaskStore::open(dir.path(), 7).unwrap().store_trained(key.clone(), trained(1)).unwrap();
        let store = TaskStore::open(dir.path(), 8).unwrap();
        assert!(matches!(store.get_record(&key), Err(Error::StaleEntry(_))));
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let keys: Vec<TaskKey> = (0..4)
            .map(|i| TaskKey::new(format!("task{i}"), &template(&format!("t{i}"))).unwrap())
            .collect();
        let mut written = Vec::new();
        {
            let mut store = TaskStore::open(dir.path(), 42).unwrap();
            for (i, key) in keys.iter().enumerate() {
                written.push(store.store_trained(key.clone(), trained(i as u64)).unwrap());
            }
            store.invalidate(&keys[1]).unwrap();
        }
        let store = TaskStore::open(dir.path(), 42).unwrap();
        for (i, key) in keys.iter().enumerate() {
            let got = store.get_record(key).unwrap();
            if i == 1 {
                assert_eq!(got, None);
            } else {
                let got = got.unwrap();
                assert_eq!(got, written[i]);
                assert_eq!(
                    store.vector(got.vector_ref).unwrap().as_slice(),
                    trained(i as u64).vector.as_slice()
                );
            }
        }
        assert_eq!(store.vector_entries().len(), 4);
    }

    #[test]
    fn corrupt_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(RECORD_LOG), "put\tonly-two\n").unwrap();
        assert!(matches!(TaskStore::open(dir.path(), 0), Err(Error::Store(_))));
        std::fs::write(dir.path().join(RECORD_LOG), "").unwrap();
        std::fs::write(dir.path().join(VECTOR_FILE), [9u8, 0, 0, 0, 1]).unwrap();
        assert!(matches!(TaskStore::open(dir.path(), 0), Err(Error::Store(_))));
    }

    #[test]
    fn template_hashes_do_not_collide() {
        let tok = Tokenizer::new(["x", "y", "z", "w"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = HashSet::new();
        for i in 0..10_000 {
            let words = ["x", "y", "z", "w"];
            let prompt: Vec<&str> = (0..rng.random_range(0..4)).map(|_| words[rng.random_range(0..4)]).collect();
            let t = Template::new(
                format!("tpl{i}-{}", rng.random::<u32>()),
                format!("{} {{input}}", prompt.join(" ")),
                "{label}",
                vec!["x".into(), "y".into()],
                &tok,
            )
            .unwrap();
            assert!(seen.insert(template_hash(&t)), "collision at {i}");
        }
        // equal templates hash equal
        assert_eq!(template_hash(&template("q")), template_hash(&template("q")));
    }

    #[test]
    fn nearest_vector_matches_full_scan() {
        let mut store = TaskStore::in_memory(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut raw = Vec::new();
        for _ in 0..100 {
            let data: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            raw.push(data.clone());
            store
                .insert_vector(&ContextVector::from_parts(1, 4, data, 1, Provenance::Unspecified).unwrap())
                .unwrap();
        }
        let q: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query = ContextVector::from_parts(1, 4, q.clone(), 1, Provenance::Unspecified).unwrap();
        let hits = store.nearest_vector(&query, 5).unwrap();
        let mut oracle: Vec<(usize, f64)> = raw
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let dot: f64 = v.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
                let na: f64 = v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
                (i, dot / (na * nb))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        for (hit, (i, s)) in hits.iter().zip(&oracle) {
            assert_eq!(hit.entry.id, *i as u64);
            assert!((hit.similarity - s).abs() < 1e-12);
        }

        // a stored vector finds itself first
        let own = ContextVector::from_parts(1, 4, raw[17].clone(), 1, Provenance::Unspecified).unwrap();
        let top = &store.nearest_vector(&own, 1).unwrap()[0];
        assert_eq!(top.entry.id, 17);
        assert!((top.similarity - 1.0).abs() < 1e-12);

        assert_eq!(store.nearest_vector(&own, 500).unwrap().len(), 100);
        let zero = ContextVector::zeros(1, 4).unwrap();
        assert!(store.nearest_vector(&zero, 1).is_err());
        assert!(TaskStore::in_memory(0).nearest_vector(&own, 1).is_err());
    }

    #[test]
    fn ties_keep_insertion_order() {
        let mut store = TaskStore::in_memory(1);
        let v = ContextVector::from_parts(1, 1, vec![1.0, 2.0], 1, Provenance::Unspecified).unwrap();
        for _ in 0..3 {
            store.insert_vector(&v).unwrap();
        }
        let ids: Vec<u64> = store.nearest_vector(&v, 3).unwrap().iter().map(|n| n.entry.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }
}
