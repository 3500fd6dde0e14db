//! File-backed document store and corpus bundles.
//!
//! Documents live at `<root>/<kind>/<id>.json` in their canonical form and
//! are written through a temporary file plus rename, so a crash never leaves
//! a torn document behind. Writers are serialized by the handle; readers run
//! concurrently.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    from_document, to_document, Document, DocumentError, ExpertRating, GenerationTrace, StudentTaskRating, Submission,
    SurveyResponse, Task, TaskStatus, ValidationError, SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Tasks,
    Traces,
    ExpertRatings,
    StudentRatings,
    Submissions,
    Surveys,
}

impl Kind {
    pub fn dir_name(self) -> &'static str {
        match self {
            Kind::Tasks => "tasks",
            Kind::Traces => "traces",
            Kind::ExpertRatings => "expert_ratings",
            Kind::StudentRatings => "student_ratings",
            Kind::Submissions => "submissions",
            Kind::Surveys => "surveys",
        }
    }

    const ALL: [Kind; 6] =
        [Kind::Tasks, Kind::Traces, Kind::ExpertRatings, Kind::StudentRatings, Kind::Submissions, Kind::Surveys];
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind}/{id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{kind}/{id} already exists with different content")]
    ConflictingWrite { kind: &'static str, id: String },
    #[error("invalid document id {0:?}")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Document { path: PathBuf, source: DocumentError },
    #[error("store at {path} has schema_version {found}, expected {SCHEMA_VERSION}")]
    Schema { path: PathBuf, found: Value },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Ids are 1 to 128 characters of ASCII alphanumerics, `-`, `_` and `.`,
/// not starting with a dot.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Writes `bytes` to `path` through a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).and_then(|_| tmp.as_file().sync_all()).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

fn read_document<T: Document>(path: &Path) -> Result<T, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_document(&text).map_err(|source| StoreError::Document { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskFilter {
    pub status: Option<TaskStatus>,
    /// Exact number of requested concepts.
    pub concept_count: Option<usize>,
    /// Inclusive lower bound on `created_at`.
    pub created_from: Option<DateTime<Utc>>,
    /// Exclusive upper bound on `created_at`.
    pub created_before: Option<DateTime<Utc>>,
}

impl TaskFilter {
    pub fn matches(&self, t: &Task) -> bool {
        self.status.is_none_or(|s| t.status == s)
            && self.concept_count.is_none_or(|c| t.concept_count() == c)
            && self.created_from.is_none_or(|from| t.created_at >= from)
            && self.created_before.is_none_or(|to| t.created_at < to)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreMeta {
    schema_version: Value,
}

pub struct Store {
    root: PathBuf,
    lock: RwLock<()>,
}

impl Store {
    /// Opens or creates a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for kind in Kind::ALL {
            let dir = root.join(kind.dir_name());
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let meta_path = root.join("store.json");
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let meta: StoreMeta = serde_json::from_str(&text).map_err(|e| StoreError::Document {
                path: meta_path.clone(),
                source: DocumentError::Syntax(e.to_string()),
            })?;
            if meta.schema_version != SCHEMA_VERSION {
                return Err(StoreError::Schema { path: meta_path, found: meta.schema_version });
            }
        } else {
            let meta = serde_json::to_vec_pretty(&StoreMeta { schema_version: SCHEMA_VERSION.into() }).expect("meta");
            write_atomic(&meta_path, &meta)?;
        }
        Ok(Self { root, lock: RwLock::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, kind: Kind, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        Ok(self.root.join(kind.dir_name()).join(format!("{id}.json")))
    }

    /// Stores a document. Rewriting identical content is a no-op; different
    /// content under an existing id needs `overwrite`.
    pub fn put<T: Document>(&self, kind: Kind, id: &str, value: &T, overwrite: bool) -> Result<(), StoreError> {
        let path = self.path(kind, id)?;
        value.validate().map_err(|e| StoreError::Document { path: path.clone(), source: DocumentError::Invalid(e) })?;
        let doc = to_document(value);
        let _guard = self.lock.write().unwrap_or_else(|e| e.into_inner());
        match std::fs::read_to_string(&path) {
            Ok(existing) if existing == doc => return Ok(()),
            Ok(_) if !overwrite => {
                return Err(StoreError::ConflictingWrite { kind: kind.dir_name(), id: id.to_string() })
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&path)(e)),
        }
        write_atomic(&path, doc.as_bytes())
    }

    pub fn get<T: Document>(&self, kind: Kind, id: &str) -> Result<T, StoreError> {
        let path = self.path(kind, id)?;
        let _guard = self.lock.read().unwrap_or_else(|e| e.into_inner());
        if !path.is_file() {
            return Err(StoreError::NotFound { kind: kind.dir_name(), id: id.to_string() });
        }
        read_document(&path)
    }

    pub fn exists(&self, kind: Kind, id: &str) -> bool {
        self.path(kind, id).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Ids of one kind, sorted.
    pub fn ids(&self, kind: Kind) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(kind.dir_name());
        let _guard = self.lock.read().unwrap_or_else(|e| e.into_inner());
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn list<T: Document>(&self, kind: Kind) -> Result<Vec<T>, StoreError> {
        self.ids(kind)?.iter().map(|id| self.get(kind, id)).collect()
    }

    pub fn list_tasks(&self, filter: &TaskFilter) -> Result<Vec<Task>, StoreError> {
        Ok(self.list::<Task>(Kind::Tasks)?.into_iter().filter(|t| filter.matches(t)).collect())
    }

    pub fn put_task(&self, task: &Task, trace: &GenerationTrace) -> Result<(), StoreError> {
        crate::domain::validate_task_with_trace(task, trace).map_err(|e| StoreError::Document {
            path: self.root.join(Kind::Tasks.dir_name()),
            source: DocumentError::Invalid(e),
        })?;
        // Trace first, so a stored task always has its trace.
        self.put(Kind::Traces, &task.id, trace, false)?;
        self.put(Kind::Tasks, &task.id, task, false)
    }

    pub fn get_task(&self, id: &str) -> Result<Task, StoreError> {
        self.get(Kind::Tasks, id)
    }

    pub fn get_trace(&self, task_id: &str) -> Result<GenerationTrace, StoreError> {
        self.get(Kind::Traces, task_id)
    }

    pub fn expert_ratings_for(&self, task_id: &str) -> Result<Vec<ExpertRating>, StoreError> {
        Ok(self.list::<ExpertRating>(Kind::ExpertRatings)?.into_iter().filter(|r| r.task_id == task_id).collect())
    }

    pub fn put_expert_rating(&self, r: &ExpertRating) -> Result<(), StoreError> {
        let id = format!("{}.{}", r.task_id, r.rater_id);
        self.put(Kind::ExpertRatings, &id, r, true)
    }

    /// Last write wins per task and session.
    pub fn put_student_rating(&self, session: &str, r: &StudentTaskRating) -> Result<(), StoreError> {
        self.put(Kind::StudentRatings, &format!("{}.{session}", r.task_id), r, true)
    }

    pub fn put_submission(&self, id: &str, s: &Submission) -> Result<(), StoreError> {
        self.put(Kind::Submissions, id, s, false)
    }

    pub fn put_survey(&self, id: &str, s: &SurveyResponse) -> Result<(), StoreError> {
        self.put(Kind::Surveys, id, s, true)
    }

    pub fn export_corpus(&self, filter: &TaskFilter, out: &Path) -> Result<CorpusManifest, StoreError> {
        let ratings = self.list::<ExpertRating>(Kind::ExpertRatings)?;
        let mut entries = Vec::new();
        for task in self.list_tasks(filter)? {
            let trace = match self.get_trace(&task.id) {
                Ok(t) => t,
                Err(StoreError::NotFound { .. }) => GenerationTrace::new(&task.id),
                Err(e) => return Err(e),
            };
            let expert_ratings = ratings.iter().filter(|r| r.task_id == task.id).cloned().collect();
            entries.push(CorpusEntry { task, trace, expert_ratings });
        }
        write_corpus(out, &entries)
    }

    /// Loads a bundle into the store; identical documents are accepted again.
    pub fn import_corpus(&self, dir: &Path) -> Result<CorpusManifest, StoreError> {
        let (manifest, entries) = read_corpus(dir)?;
        for e in &entries {
            self.put_task(&e.task, &e.trace)?;
            for r in &e.expert_ratings {
                self.put_expert_rating(r)?;
            }
        }
        Ok(manifest)
    }
}

/// One task of a corpus bundle with its trace and expert ratings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub task: Task,
    pub trace: GenerationTrace,
    #[serde(default)]
    pub expert_ratings: Vec<ExpertRating>,
}

impl Document for CorpusEntry {
    fn validate(&self) -> Result<(), ValidationError> {
        crate::domain::validate_task_with_trace(&self.task, &self.trace)?;
        for r in &self.expert_ratings {
            if r.task_id != self.task.id {
                return Err(ValidationError::new("expert_ratings.task_id", "rating belongs to another task"));
            }
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub task_count: u64,
    /// Tasks per number of requested concepts; "1", "2" and "3" always present.
    pub bucket_counts: BTreeMap<String, u64>,
    pub status_counts: BTreeMap<String, u64>,
    /// SHA-256 over the entries with timestamps and timings removed, so runs
    /// that generated the same content hash equal.
    pub corpus_hash: String,
}

impl Document for CorpusManifest {
    fn validate(&self) -> Result<(), ValidationError> {
        let sum: u64 = self.bucket_counts.values().sum();
        if sum != self.task_count {
            return Err(ValidationError::new("bucket_counts", format!("sum {sum} differs from task_count")));
        }
        Ok(())
    }
}

const VOLATILE_FIELDS: [&str; 3] = ["created_at", "submitted_at", "wall_time_ms"];

fn strip_volatile(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for f in VOLATILE_FIELDS {
                map.remove(f);
            }
            map.values_mut().for_each(strip_volatile);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

/// Content hash of a set of entries, independent of their order.
pub fn corpus_hash(entries: &[CorpusEntry]) -> String {
    let mut sorted: Vec<&CorpusEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.task.id.cmp(&b.task.id));
    let mut h = Sha256::new();
    for e in sorted {
        let mut v = serde_json::to_value(e).expect("entry serializes");
        strip_volatile(&mut v);
        h.update(serde_json::to_vec(&v).expect("value serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn manifest_for(entries: &[CorpusEntry]) -> CorpusManifest {
    let mut bucket_counts: BTreeMap<String, u64> = ["1", "2", "3"].iter().map(|k| (k.to_string(), 0)).collect();
    let mut status_counts = BTreeMap::new();
    for e in entries {
        *bucket_counts.entry(e.task.concept_count().to_string()).or_default() += 1;
        *status_counts.entry(e.task.status.to_string()).or_default() += 1;
    }
    CorpusManifest { task_count: entries.len() as u64, bucket_counts, status_counts, corpus_hash: corpus_hash(entries) }
}

/// Writes `manifest.json` and `tasks/<id>.json` under `dir`. The manifest
/// is written last, so a bundle with a manifest is complete.
pub fn write_corpus(dir: &Path, entries: &[CorpusEntry]) -> Result<CorpusManifest, StoreError> {
    let tasks_dir = dir.join("tasks");
    std::fs::create_dir_all(&tasks_dir).map_err(io_err(&tasks_dir))?;
    for e in entries {
        if !valid_id(&e.task.id) {
            return Err(StoreError::InvalidId(e.task.id.clone()));
        }
        write_atomic(&tasks_dir.join(format!("{}.json", e.task.id)), to_document(e).as_bytes())?;
    }
    let manifest = manifest_for(entries);
    write_atomic(&dir.join("manifest.json"), to_document(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Reads a bundle, checking the manifest against the entries found.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<CorpusEntry>), StoreError> {
    let manifest: CorpusManifest = read_document(&dir.join("manifest.json"))?;
    let tasks_dir = dir.join("tasks");
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&tasks_dir) {
        Ok(rd) => {
            rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect()
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&tasks_dir)(e)),
    };
    paths.sort();
    let entries = paths.iter().map(|p| read_document::<CorpusEntry>(p)).collect::<Result<Vec<_>, _>>()?;
    let found = manifest_for(&entries);
    if found.task_count != manifest.task_count || found.corpus_hash != manifest.corpus_hash {
        return Err(StoreError::Document {
            path: dir.join("manifest.json"),
            source: DocumentError::Invalid(ValidationError::new(
                "corpus_hash",
                format!("manifest lists {} tasks but the bundle content differs", manifest.task_count),
            )),
        });
    }
    Ok((manifest, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ExecutionOutcome, GenerationRequest, IterationRecord, TestResult};
    use chrono::TimeZone;

    pub(crate) fn fixture(id: &str, concepts: usize, status: TaskStatus, day: u32) -> (Task, GenerationTrace) {
        let outcome = ExecutionOutcome {
            compile_ok: true,
            tests: vec![TestResult {
                name: "t".into(),
                passed: status == TaskStatus::Functional,
                message: String::new(),
            }],
            stdout: String::new(),
            stderr: String::new(),
            timed_out: false,
            wall_time_ms: 12,
        };
        let task = Task {
            id: id.into(),
            request: GenerationRequest::new((0..concepts).map(|i| format!("c{i}")), "music", "English"),
            description: "d".into(),
            code_skeleton: "def f(): pass".into(),
            unit_tests: "def test_t(): pass".into(),
            model_solution: "def f(): return 1".into(),
            status,
            iterations_used: 1,
            created_at: Utc.with_ymd_and_hms(2024, 3, day, 12, 0, 0).unwrap(),
        };
        let trace = GenerationTrace {
            task_id: id.into(),
            iterations: vec![IterationRecord {
                index: 1,
                model_solution: task.model_solution.clone(),
                unit_tests: task.unit_tests.clone(),
                outcome,
                reflection_feedback: None,
            }],
        };
        (task, trace)
    }

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path().join("db")).unwrap();
        (dir, s)
    }

    #[test]
    fn read_your_writes_and_not_found() {
        let (_d, s) = store();
        let (t, tr) = fixture("t1", 1, TaskStatus::Functional, 1);
        s.put_task(&t, &tr).unwrap();
        assert_eq!(s.get_task("t1").unwrap(), t);
        assert_eq!(s.get_trace("t1").unwrap(), tr);
        assert!(matches!(s.get_task("nope"), Err(StoreError::NotFound { .. })));
        assert!(matches!(s.get_task("../etc/passwd"), Err(StoreError::InvalidId(_))));
    }

    #[test]
    fn conflicting_write_needs_overwrite() {
        let (_d, s) = store();
        let (t, tr) = fixture("t1", 1, TaskStatus::Functional, 1);
        s.put_task(&t, &tr).unwrap();
        s.put_task(&t, &tr).unwrap();
        let mut changed = t.clone();
        changed.description = "other".into();
        assert!(matches!(s.put(Kind::Tasks, "t1", &changed, false), Err(StoreError::ConflictingWrite { .. })));
        s.put(Kind::Tasks, "t1", &changed, true).unwrap();
        assert_eq!(s.get_task("t1").unwrap().description, "other");
    }

    #[test]
    fn filters() {
        let (_d, s) = store();
        for (id, c, st, day) in [
            ("a", 1, TaskStatus::Functional, 1),
            ("b", 2, TaskStatus::NonFunctional, 2),
            ("c", 2, TaskStatus::Functional, 3),
        ] {
            let (t, tr) = fixture(id, c, st, day);
            s.put_task(&t, &tr).unwrap();
        }
        let ids = |f: TaskFilter| s.list_tasks(&f).unwrap().into_iter().map(|t| t.id).collect::<Vec<_>>();
        assert_eq!(ids(TaskFilter { status: Some(TaskStatus::Functional), ..Default::default() }), ["a", "c"]);
        assert_eq!(ids(TaskFilter { concept_count: Some(2), ..Default::default() }), ["b", "c"]);
        let from = Utc.with_ymd_and_hms(2024, 3, 2, 0, 0, 0).unwrap();
        let to = Utc.with_ymd_and_hms(2024, 3, 3, 0, 0, 0).unwrap();
        assert_eq!(ids(TaskFilter { created_from: Some(from), created_before: Some(to), ..Default::default() }), ["b"]);
    }

    #[test]
    fn export_import_round_trip() {
        let (_d, s) = store();
        for (id, c) in [("a", 1), ("b", 2), ("c", 3), ("d", 1)] {
            let (t, tr) = fixture(id, c, TaskStatus::Functional, 1);
            s.put_task(&t, &tr).unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let m = s.export_corpus(&TaskFilter::default(), out.path()).unwrap();
        assert_eq!(m.bucket_counts, BTreeMap::from([("1".into(), 2), ("2".into(), 1), ("3".into(), 1)]));
        let (_d2, s2) = store();
        let m2 = s2.import_corpus(out.path()).unwrap();
        assert_eq!(m, m2);
        for id in ["a", "b", "c", "d"] {
            assert_eq!(to_document(&s.get_task(id).unwrap()), to_document(&s2.get_task(id).unwrap()));
        }
    }

    #[test]
    fn empty_export_has_zeroed_manifest() {
        let (_d, s) = store();
        let out = tempfile::tempdir().unwrap();
        let m = s.export_corpus(&TaskFilter::default(), out.path()).unwrap();
        assert_eq!(m.task_count, 0);
        assert_eq!(m.bucket_counts.values().copied().collect::<Vec<_>>(), [0, 0, 0]);
        assert_eq!(read_corpus(out.path()).unwrap().1.len(), 0);
    }

    #[test]
    fn hash_ignores_timings() {
        let (t, mut tr) = fixture("a", 1, TaskStatus::Functional, 1);
        let e1 = CorpusEntry { task: t.clone(), trace: tr.clone(), expert_ratings: vec![] };
        tr.iterations[0].outcome.wall_time_ms = 999;
        let mut t2 = t;
        t2.created_at = Utc::now();
        let e2 = CorpusEntry { task: t2, trace: tr, expert_ratings: vec![] };
        assert_eq!(corpus_hash(std::slice::from_ref(&e1)), corpus_hash(std::slice::from_ref(&e2)));
        let mut e3 = e2;
        e3.task.description = "changed".into();
        assert_ne!(corpus_hash(&[e1]), corpus_hash(&[e3]));
    }

    #[test]
    fn tampered_bundle_is_rejected() {
        let (_d, s) = store();
        let (t, tr) = fixture("a", 1, TaskStatus::Functional, 1);
        s.put_task(&t, &tr).unwrap();
        let out = tempfile::tempdir().unwrap();
        s.export_corpus(&TaskFilter::default(), out.path()).unwrap();
        std::fs::remove_file(out.path().join("tasks/a.json")).unwrap();
        assert!(read_corpus(out.path()).is_err());
    }

    #[test]
    fn no_temp_files_left_behind() {
        let (_d, s) = store();
        let (t, tr) = fixture("a", 1, TaskStatus::Functional, 1);
        s.put_task(&t, &tr).unwrap();
        let names: Vec<_> =
            std::fs::read_dir(s.root().join("tasks")).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, ["a.json"]);
    }
}
